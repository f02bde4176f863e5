"""Three-term recurrences and Jacobi operators of spectral measures.

Two routes lead from a measure to its recurrence coefficients:

* determinant ratios of the Hankel moment matrices (exact algebra,
  exponentially ill-conditioned, kept for small orders);
* the Stieltjes procedure, i.e. Lanczos on the diagonal matrix of
  quadrature nodes started from the square roots of the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, ConvergenceError, MomentInconsistencyError
from .measures import DiscretizedMeasure, MomentTable
from .spectrum import BulkSupport

__all__ = [
    "HankelSystem",
    "JacobiOperator",
    "hankel_system",
    "hankel_recurrence",
    "recurrence_from_hankel",
    "recurrence_from_discretized",
    "asymptotic_jacobi",
    "jacobi_spectral_measure",
    "tridiagonal_eigen",
]

HANKEL_MAX_ORDER = 8


@dataclass(frozen=True, eq=False)
class HankelSystem:
    """Hankel determinants and the leading coefficients they induce.

    Entries are mpmath numbers held in object arrays.

    Attributes
    ----------
    moments : numpy.ndarray
        ``m_0 .. m_{2n}``.
    det : numpy.ndarray
        ``D_{-1} = 1, D_0, ..., D_n`` stored at offsets ``0 .. n+1``.
    minor : numpy.ndarray
        ``det M'_k`` for ``k = 0 .. n`` where ``M'_k`` drops the last row
        and second-to-last column of ``M_k`` (``M'_0`` is empty).
    lead : numpy.ndarray
        ``l_k = sqrt(D_{k-1} / D_k)``.
    sub : numpy.ndarray
        ``s_k = -det M'_k / sqrt(D_k D_{k-1})`` with ``s_0 = 0``.
    """

    moments: np.ndarray
    det: np.ndarray
    minor: np.ndarray
    lead: np.ndarray
    sub: np.ndarray

    @property
    def order(self) -> int:
        return self.lead.size - 1

    def D(self, k: int) -> float:
        """``D_k`` for ``k >= -1``."""
        return float(self.det[k + 1])


@dataclass(frozen=True, eq=False)
class JacobiOperator:
    """Symmetric tridiagonal operator with an optional constant tail.

    Parameters
    ----------
    diag : array_like
        ``a_0 .. a_{n-1}``.
    offdiag : array_like
        ``b_0 .. b_{n-2}``, all positive. With a tail, one extra entry
        ``b_{n-1}`` coupling to the tail is allowed.
    tail : tuple of float, optional
        ``(a_inf, b_inf)`` used for every index beyond the stored ones.
    """

    diag: np.ndarray
    offdiag: np.ndarray
    tail: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.diag, dtype=float).ravel()
        b = np.asarray(self.offdiag, dtype=float).ravel()
        if a.size == 0:
            raise ValueError("a Jacobi operator needs at least one diagonal entry")
        allowed = (a.size - 1, a.size) if self.tail is not None else (a.size - 1,)
        if b.size not in allowed:
            raise ValueError("offdiagonal length does not match the diagonal")
        if np.any(b <= 0):
            raise ValueError("offdiagonal entries must be positive")
        if self.tail is not None and not self.tail[1] > 0:
            raise ValueError("tail offdiagonal must be positive")
        object.__setattr__(self, "diag", a)
        object.__setattr__(self, "offdiag", b)

    @property
    def size(self) -> int | None:
        """Number of rows, or ``None`` for a semi-infinite operator."""
        return None if self.tail is not None else self.diag.size

    def coefficients(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """First ``n`` diagonal and ``n - 1`` offdiagonal entries (tail-extended)."""
        if self.tail is None and n > self.diag.size:
            raise ValueError("operator is finite and shorter than requested")
        a = np.empty(n)
        b = np.empty(max(n - 1, 0))
        k = min(n, self.diag.size)
        a[:k] = self.diag[:k]
        kb = min(n - 1, self.offdiag.size)
        b[:kb] = self.offdiag[:kb]
        if self.tail is not None:
            a[k:] = self.tail[0]
            b[max(kb, 0):] = self.tail[1]
        return a, b

    def matrix(self, n: int | None = None) -> np.ndarray:
        """Dense leading ``n x n`` block."""
        n = self.diag.size if n is None else n
        a, b = self.coefficients(n)
        return np.diag(a) + np.diag(b, 1) + np.diag(b, -1)

    def truncated(self, n: int) -> JacobiOperator:
        a, b = self.coefficients(n)
        return JacobiOperator(a, b)

    def attach_tail(self, tail: tuple[float, float], tol: float = 1e-8) -> JacobiOperator:
        """Replace coefficients by ``tail`` once they have settled to it.

        The cut is the first index after which every stored pair satisfies
        ``|a_n - a_inf| + |b_n - b_inf| < tol``. Without such an index the
        tail starts after the last stored coefficient.
        """
        if self.tail is not None:
            raise ValueError("operator already has a tail")
        a, b = self.diag, self.offdiag
        n = a.size
        dev = np.abs(a - tail[0])
        dev[: n - 1] += np.abs(b - tail[1])
        cut = n
        while cut > 1 and dev[cut - 1] < tol:
            cut -= 1
        return JacobiOperator(a[:cut], b[: min(cut, n - 1)], tail)

    def moment(self, k: int) -> float:
        """``f_1^T T^k f_1``; only the leading ``k//2 + 1`` rows matter."""
        n = k // 2 + 1
        if self.tail is None:
            n = min(n, self.diag.size)
        return _first_power(self.matrix(n), k)


def _first_power(mat: np.ndarray, k: int) -> float:
    half = k // 2
    v = np.zeros(mat.shape[0])
    v[0] = 1.0
    for _ in range(half):
        v = mat @ v
    if k % 2 == 0:
        return float(v @ v)
    return float(v @ (mat @ v))


_HANKEL_DPS = 60


def hankel_system(moments, n: int) -> HankelSystem:
    """Hankel data up to order ``n`` from moments ``m_0 .. m_{2n}``.

    All algebra runs in mpmath at 60 digits with the inputs taken as
    exact, so the only error left is the one carried by the moments.
    A :class:`MomentTable` contributes its extended-precision entries when
    it has them.

    Raises
    ------
    ConditioningError
        If ``n`` exceeds the conditioning guard.
    MomentInconsistencyError
        If a Hankel determinant is not positive.
    """
    import mpmath

    if n > HANKEL_MAX_ORDER:
        raise ConditioningError(f"Hankel route limited to order {HANKEL_MAX_ORDER}")
    if isinstance(moments, MomentTable):
        moments = moments.exact(0, min(2 * n, moments.k_max))
    moments = list(moments)[: 2 * n + 1]
    if len(moments) < 2 * n + 1:
        raise ValueError(f"need moments m_0 .. m_{2 * n}")
    with mpmath.workdps(_HANKEL_DPS):
        mom = [mpmath.mpf(v) for v in moments]
        det = [mpmath.mpf(1)]
        minor = [mpmath.mpf(1), mpmath.mpf(0)]
        for k in range(n + 1):
            full = mpmath.matrix([[mom[i + j] for j in range(k + 1)] for i in range(k + 1)])
            det.append(mpmath.det(full))
            if k > 0:
                cols = [j for j in range(k + 1) if j != k - 1]
                sub_mat = mpmath.matrix([[full[i, j] for j in cols] for i in range(k)])
                minor.append(mpmath.det(sub_mat))
        if any(d <= 0 for d in det[1:]):
            raise MomentInconsistencyError("Hankel determinants must be positive")
        lead = [mpmath.sqrt(det[k] / det[k + 1]) for k in range(n + 1)]
        sub = [mpmath.mpf(0)] + [
            -minor[k + 1] / mpmath.sqrt(det[k + 1] * det[k]) for k in range(1, n + 1)
        ]
        return HankelSystem(
            np.array(mom, dtype=object),
            np.array(det, dtype=object),
            np.array(minor[1:], dtype=object),
            np.array(lead, dtype=object),
            np.array(sub, dtype=object),
        )


def hankel_recurrence(h: HankelSystem, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``a_0 .. a_{n-1}`` and ``b_0 .. b_{n-1}`` from an order-``n`` system.

    ``b_k`` is evaluated both as ``l_k / l_{k+1}`` and as
    ``sqrt(D_{k-1} D_{k+1}) / D_k``; the two must agree to ``1e-9``.
    """
    import mpmath

    if h.order < n:
        raise ValueError("Hankel system order too small")
    with mpmath.workdps(_HANKEL_DPS):
        a = [h.sub[k] / h.lead[k] - h.sub[k + 1] / h.lead[k + 1] for k in range(n)]
        b_lead = [h.lead[k] / h.lead[k + 1] for k in range(n)]
        b_det = [mpmath.sqrt(h.det[k] * h.det[k + 2]) / h.det[k + 1] for k in range(n)]
    a = np.array([float(v) for v in a])
    b_lead = np.array([float(v) for v in b_lead])
    b_det = np.array([float(v) for v in b_det])
    if np.any(np.abs(b_lead - b_det) > 1e-9 * np.maximum(1.0, np.abs(b_det))):
        raise MomentInconsistencyError("offdiagonal formulas disagree")
    return a, b_lead


def recurrence_from_hankel(h: HankelSystem, n: int) -> JacobiOperator:
    """Leading ``n x n`` Jacobi block from Hankel determinant ratios."""
    a, b = hankel_recurrence(h, n)
    return JacobiOperator(a, b[: n - 1])


def recurrence_from_discretized(
    d: DiscretizedMeasure, n: int, *, breakdown: float = 1e-13
) -> JacobiOperator:
    """Stieltjes procedure via Lanczos with full reorthogonalization.

    Runs on ``diag(nodes)`` from the vector ``sqrt(weights)``. If an
    offdiagonal falls below ``breakdown`` times the node scale the measure
    has fewer than ``n`` support points and a shorter operator is returned.
    """
    x = d.all_nodes
    w = d.all_weights
    keep = w > 0
    x, w = x[keep], w[keep]
    n = min(n, x.size)
    scale = float(np.max(np.abs(x)))
    q = np.sqrt(w / w.sum())
    basis = np.zeros((x.size, n))
    a = np.zeros(n)
    b = np.zeros(n)
    prev = np.zeros_like(q)
    b_prev = 0.0
    size = n
    for k in range(n):
        basis[:, k] = q
        v = x * q
        a[k] = q @ v
        v -= a[k] * q + b_prev * prev
        for _ in range(2):
            v -= basis[:, : k + 1] @ (basis[:, : k + 1].T @ v)
        b[k] = np.linalg.norm(v)
        if k + 1 == n:
            break
        if b[k] <= breakdown * scale:
            size = k + 1
            break
        prev, q, b_prev = q, v / b[k], b[k]
    return JacobiOperator(a[:size], b[: size - 1])


def asymptotic_jacobi(support: BulkSupport) -> tuple[float, float]:
    """Constant tail ``((g+ + g-)/2, (g+ - g-)/4)``."""
    return (
        (support.gamma_plus + support.gamma_minus) / 2,
        (support.gamma_plus - support.gamma_minus) / 4,
    )


def tridiagonal_eigen(
    diag, offdiag, *, max_sweeps: int = 60
) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and first eigenvector components of a symmetric tridiagonal.

    Implicit QL with Wilkinson-type shifts. Only the first row of the
    eigenvector matrix is accumulated.

    Returns
    -------
    values : numpy.ndarray
        Eigenvalues in ascending order.
    first : numpy.ndarray
        First components of the matching unit eigenvectors.
    """
    d = [float(v) for v in np.asarray(diag, dtype=float)]
    n = len(d)
    e = [float(v) for v in np.asarray(offdiag, dtype=float)] + [0.0]
    if len(e) != n:
        raise ValueError("offdiagonal must have length n - 1")
    z = [0.0] * n
    z[0] = 1.0
    eps = np.finfo(float).eps
    for l in range(n):
        sweeps = 0
        while True:
            m = l
            while m < n - 1:
                if abs(e[m]) <= eps * (abs(d[m]) + abs(d[m + 1])):
                    break
                m += 1
            if m == l:
                break
            sweeps += 1
            if sweeps > max_sweeps:
                raise ConvergenceError("implicit QL did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            early = False
            while i >= l:
                f = s * e[i]
                bb = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    early = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * bb
                p = s * r
                d[i + 1] = g + p
                g = c * r - bb
                zf = z[i + 1]
                z[i + 1] = s * z[i] + c * zf
                z[i] = c * z[i] - s * zf
                i -= 1
            if early:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    values = np.array(d)
    first = np.array(z)
    order = np.argsort(values)
    return values[order], first[order]


def jacobi_spectral_measure(T: JacobiOperator, k: int | None = None) -> DiscretizedMeasure:
    """Spectral measure of the leading ``k x k`` block at ``f_1``.

    Atoms sit at the eigenvalues; their weights are the squared first
    components of the eigenvectors.
    """
    k = T.diag.size if k is None else k
    a, b = T.coefficients(k)
    values, first = tridiagonal_eigen(a, b)
    weights = first**2
    weights = weights / weights.sum()
    return DiscretizedMeasure(np.empty(0), np.empty(0), tuple(zip(values, weights)))
