"""Deterministic CG and MINRES curves from the Cholesky factor of a Jacobi operator.

With ``T = L L^T`` and ``L`` lower bidiagonal (diagonal ``alpha``,
subdiagonal ``beta``), CG on ``T x = f_1`` has ``||r_k|| = prod beta/alpha``
and its error norm follows from the inverse moment ``f_1^T T^{-1} f_1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InconsistentMomentError, NotPositiveDefiniteError
from .measures import VesdSpec, discretize, discretize_vesd, moments_contour, normal_eq_measure
from .orthopoly import JacobiOperator, asymptotic_jacobi, recurrence_from_discretized
from .spectrum import BulkSupport, OutlierSet, PopulationSpectrum, find_bulk_edges, outlier_locations

__all__ = [
    "CholeskyBidiagonal",
    "PredictionCurve",
    "HaltingTime",
    "jacobi_cholesky",
    "cholesky_limits",
    "cg_prediction",
    "minres_prediction",
    "minres_residuals",
    "inverse_moment_series",
    "tail_sums",
    "error_norm_partial_exact",
    "halting_time",
    "log_halting_estimate",
    "asymptotic_rate",
    "johnstone_closed_form",
    "johnstone_cholesky",
    "chebyshev_bound",
    "Estimate",
    "estimate_vesd",
    "estimate_normal_equation",
]

_SERIES_TOL = 1e-14
_SERIES_CAP = 10_000


@dataclass(frozen=True, eq=False)
class CholeskyBidiagonal:
    """Lower bidiagonal factor of a Jacobi operator.

    Attributes
    ----------
    alpha : numpy.ndarray
        Diagonal ``alpha_0 .. alpha_{n-1}``.
    beta : numpy.ndarray
        Subdiagonal; length ``n - 1`` for a finite factor, ``n`` when a tail
        follows.
    tail : tuple of float, optional
        Constant ``(alpha_inf, beta_inf)`` continuing the factor.
    """

    alpha: np.ndarray
    beta: np.ndarray
    tail: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        beta = np.asarray(self.beta, dtype=float).ravel()
        if np.any(alpha <= 0):
            raise NotPositiveDefiniteError("Cholesky diagonal must be positive")
        want = (alpha.size,) if self.tail is not None else (max(alpha.size - 1, 0),)
        if self.tail is not None and beta.size == alpha.size - 1:
            beta = np.append(beta, self.tail[1])
        if beta.shape != want:
            raise ValueError("beta length does not match alpha")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def size(self) -> int | None:
        """Number of rows, or ``None`` for a semi-infinite factor."""
        return None if self.tail is not None else self.alpha.size

    def coefficients(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``alpha_0..alpha_{n-1}`` and ``beta_0..beta_{n-1}``.

        A finite factor pads ``beta`` with ``0`` beyond its last row, which
        is how its terminating CG residual reads.
        """
        if self.tail is None:
            if n > self.alpha.size:
                raise ValueError("factor too short")
            beta = np.append(self.beta, 0.0)[:n]
            return self.alpha[:n], beta
        extra = max(n - self.alpha.size, 0)
        alpha = np.concatenate([self.alpha, np.full(extra, self.tail[0])])[:n]
        beta = np.concatenate([self.beta, np.full(extra, self.tail[1])])[:n]
        return alpha, beta

    def matrix(self, n: int | None = None) -> np.ndarray:
        n = self.alpha.size if n is None else n
        alpha, beta = self.coefficients(n)
        return np.diag(alpha) + np.diag(beta[: n - 1], -1)

    def reconstruct(self, n: int | None = None) -> np.ndarray:
        """Leading ``n x n`` block of ``L L^T``."""
        lower = self.matrix(n)
        return lower @ lower.T


@dataclass(frozen=True)
class HaltingTime:
    """Deterministic halting index for one tolerance.

    ``index`` is ``None`` when the curve never drops below ``epsilon`` (a
    saturated finite curve). On an exact tie ``tie`` holds and both
    ``index`` and ``index + 1`` are candidate halting times.
    """

    epsilon: float
    index: int | None
    tie: bool = False
    saturated: bool = False

    @property
    def candidates(self) -> tuple[int, ...]:
        if self.index is None:
            return ()
        return (self.index, self.index + 1) if self.tie else (self.index,)


@dataclass(frozen=True, eq=False)
class PredictionCurve:
    """Predicted per-iteration norms for ``k = 0 .. k_max``.

    Attributes
    ----------
    r_norm : numpy.ndarray
        Predicted ``||r_k||_2`` (times ``scale``).
    e_norm : numpy.ndarray
        Predicted ``||e_k||_W`` from the tail form.
    e_norm_partial : numpy.ndarray
        The same from ``m - partial sums``, kept for the equivalence check.
    rate : numpy.ndarray
        ``r_norm[k] / r_norm[k-1]``; ``rate[0]`` is ``nan``.
    inv_moment : float
    asymptotic_rate : float or None
        ``beta_inf / alpha_inf`` for a tail-attached factor.
    minres_r : numpy.ndarray or None
    scale : float
        Overall factor applied to both norms (``sqrt(w)`` for normal
        equations).
    """

    r_norm: np.ndarray
    e_norm: np.ndarray
    e_norm_partial: np.ndarray
    rate: np.ndarray
    inv_moment: float
    asymptotic_rate: float | None = None
    minres_r: np.ndarray | None = None
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def k_max(self) -> int:
        return self.r_norm.size - 1

    def halting(self, epsilon: float) -> tuple[HaltingTime, HaltingTime]:
        """``(tau_r, tau_e)`` for tolerance ``epsilon``."""
        return halting_time(self, epsilon)


def cholesky_limits(support: BulkSupport) -> tuple[float, float]:
    """``((sqrt g+ + sqrt g-)/2, (sqrt g+ - sqrt g-)/2)``."""
    hi, lo = math.sqrt(support.gamma_plus), math.sqrt(support.gamma_minus)
    return (hi + lo) / 2, (hi - lo) / 2


def asymptotic_rate(support: BulkSupport) -> float:
    """``J = (sqrt g+ - sqrt g-) / (sqrt g+ + sqrt g-)``."""
    a, b = cholesky_limits(support)
    return b / a


def jacobi_cholesky(
    T: JacobiOperator, *, tol: float = 1e-15, max_steps: int = _SERIES_CAP
) -> CholeskyBidiagonal:
    """Cholesky factor of a finite or tail-attached Jacobi operator.

    Pivots follow ``alpha_k^2 = a_k - beta_{k-1}^2``, ``beta_k = b_k / alpha_k``.
    With a constant tail ``(a, b)`` the recursion is continued into the tail
    until it settles on ``alpha_inf = (sqrt g+ + sqrt g-)/2``,
    ``beta_inf = (sqrt g+ - sqrt g-)/2`` where ``g+- = a +- 2b``.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot is not positive.
    """
    if T.tail is None:
        n = T.size
        a, b = T.diag, T.offdiag
        alpha = np.zeros(n)
        beta = np.zeros(max(n - 1, 0))
        prev = 0.0
        for k in range(n):
            pivot = a[k] - prev**2
            if pivot <= 0:
                raise NotPositiveDefiniteError(f"non-positive pivot at row {k}")
            alpha[k] = math.sqrt(pivot)
            if k < n - 1:
                beta[k] = b[k] / alpha[k]
                prev = beta[k]
        return CholeskyBidiagonal(alpha, beta)

    ta, tb = T.tail
    if ta - 2 * tb <= 0:
        raise NotPositiveDefiniteError("tail spectrum reaches the origin")
    hi, lo = math.sqrt(ta + 2 * tb), math.sqrt(ta - 2 * tb)
    limit = ((hi + lo) / 2, (hi - lo) / 2)
    explicit = T.diag.size
    a_head, b_head = T.coefficients(explicit + 1)
    alpha: list[float] = []
    beta: list[float] = []
    prev = 0.0
    k = 0
    while True:
        a_k = a_head[k] if k < explicit else ta
        b_k = b_head[k] if k < explicit else tb
        pivot = a_k - prev**2
        if pivot <= 0:
            raise NotPositiveDefiniteError(f"non-positive pivot at row {k}")
        alpha.append(math.sqrt(pivot))
        beta.append(b_k / alpha[-1])
        prev = beta[-1]
        k += 1
        if k > explicit and abs(alpha[-1] - limit[0]) + abs(beta[-1] - limit[1]) <= tol * limit[0]:
            break
        if k >= max_steps:
            raise ConvergenceError("Cholesky recursion did not settle on the tail")
    return CholeskyBidiagonal(np.array(alpha), np.array(beta), limit)


def _ratios(L: CholeskyBidiagonal, n: int) -> np.ndarray:
    alpha, beta = L.coefficients(n)
    return beta / alpha


def tail_sums(L: CholeskyBidiagonal, k_max: int) -> np.ndarray:
    """``f_1^T (S_k S_k^T)^{-1} f_1`` for ``k = 0 .. k_max``.

    ``S_k`` is ``L`` with its first ``k`` rows and columns removed; the
    quantity is ``||S_k^{-1} f_1||^2``, obtained by forward substitution.
    For a tail-attached factor the constant part is summed as a geometric
    series.
    """
    out = np.zeros(k_max + 1)
    if L.tail is None:
        n = L.alpha.size
        for k in range(min(k_max, n - 1) + 1):
            y = 1.0 / L.alpha[k]
            total = y * y
            for j in range(k + 1, n):
                y = -L.beta[j - 1] * y / L.alpha[j]
                total += y * y
            out[k] = total
        return out
    a_inf, b_inf = L.tail
    q = (b_inf / a_inf) ** 2
    if q >= 1:
        raise ConvergenceError("tail ratio must be below one")
    explicit = L.alpha.size
    alpha, beta = L.coefficients(max(explicit, k_max) + 1)
    for k in range(k_max + 1):
        y = 1.0 / alpha[k]
        total = y * y
        for j in range(k + 1, explicit + 1):
            y = -beta[j - 1] * y / alpha[j]
            total += y * y
        # every later step uses the constant ratio beta_inf / alpha_inf
        out[k] = total + y * y * q / (1 - q)
    return out


def inverse_moment_series(L: CholeskyBidiagonal) -> float:
    """``f_1^T T^{-1} f_1 = alpha_0^{-2} sum_l prod_{j<=l} beta_{j-1}^2/alpha_j^2``.

    Raises
    ------
    ConvergenceError
        If the tail ratio is at least one.
    """
    return float(tail_sums(L, 0)[0])


def _partial_sums(L: CholeskyBidiagonal, k_max: int) -> np.ndarray:
    """``alpha_0^{-2} sum_{l<k} prod_{j=1}^{l} beta_{j-1}^2/alpha_j^2`` for ``k = 0..k_max``."""
    alpha, beta = L.coefficients(max(k_max, 1))
    out = np.zeros(k_max + 1)
    term = 1.0 / alpha[0] ** 2
    for k in range(1, k_max + 1):
        out[k] = out[k - 1] + term
        if k < alpha.size:
            term *= (beta[k - 1] / alpha[k]) ** 2
    return out


def error_norm_partial_exact(T: JacobiOperator, k_max: int | None = None, *, dps: int = 50) -> np.ndarray:
    """``||e_k||_W = sqrt(m - partial sums)`` for a finite ``T``, in mpmath.

    The Cholesky factor, the series for ``m`` and the subtraction all run
    at ``dps`` digits with the entries of ``T`` taken as exact, so the
    cancellation does not reach double precision.
    """
    import mpmath

    if T.tail is not None:
        raise ValueError("the exact route needs a finite operator")
    n = T.size
    k_max = n - 1 if k_max is None else k_max
    if k_max > n:
        raise ValueError("k_max exceeds the operator size")
    with mpmath.workdps(dps):
        terms = []
        prev_beta = mpmath.mpf(0)
        term = None
        for k in range(n):
            pivot = mpmath.mpf(T.diag[k]) - prev_beta**2
            if pivot <= 0:
                raise NotPositiveDefiniteError(f"non-positive pivot at row {k}")
            alpha = mpmath.sqrt(pivot)
            term = 1 / pivot if k == 0 else term * prev_beta**2 / pivot
            terms.append(term)
            if k < n - 1:
                prev_beta = mpmath.mpf(T.offdiag[k]) / alpha
        total = mpmath.fsum(terms)
        out = []
        partial = mpmath.mpf(0)
        for k in range(k_max + 1):
            out.append(float(mpmath.sqrt(max(total - partial, 0))))
            if k < n:
                partial += terms[k]
    return np.array(out)


def cg_prediction(
    L: CholeskyBidiagonal,
    inv_moment: float | None = None,
    k_max: int = 30,
    *,
    scale: float = 1.0,
    rtol: float = 1e-10,
    moment_tol: float = 1e-8,
    with_minres: bool = True,
) -> PredictionCurve:
    """CG residual and error curves.

    ``||r_k|| = scale * prod_{j<k} beta_j/alpha_j`` and
    ``||e_k||_W^2 = scale^2 (m - partial sums)``. The error is also
    evaluated as ``||r_k||^2 f_1^T (S_k S_k^T)^{-1} f_1``, which avoids the
    cancellation in ``m - partial sums`` and is the reported value.

    Parameters
    ----------
    L : CholeskyBidiagonal
    inv_moment : float, optional
        ``m``; if omitted the Cholesky series is used. A supplied value is
        checked against the series to ``moment_tol`` (relative).
    k_max : int
        Last iteration; a finite factor of size ``n`` allows ``k_max <= n``.
    scale : float
    rtol : float
        Relative agreement required between the two error routes. Where
        ``m - partial sums`` is dominated by round-off in ``m`` the
        comparison falls back to that round-off level.

    Raises
    ------
    InconsistentMomentError
        If ``inv_moment`` disagrees with the series, or the partial-sum form
        goes negative beyond round-off.
    """
    if L.tail is None and k_max > L.alpha.size:
        raise ValueError("k_max exceeds the factor size")
    series = inverse_moment_series(L)
    if inv_moment is None:
        inv_moment = series
    elif abs(inv_moment - series) > moment_tol * abs(series):
        raise InconsistentMomentError(
            f"inverse moment {inv_moment!r} disagrees with the Cholesky series {series!r}"
        )
    ratios = np.ones(k_max + 1)
    ratios[1:] = _ratios(L, k_max)
    r_unit = np.cumprod(ratios)
    if L.tail is None and k_max == L.alpha.size:
        r_unit[-1] = 0.0
    tails = tail_sums(L, min(k_max, L.alpha.size - 1) if L.tail is None else k_max)
    tails = np.pad(tails, (0, k_max + 1 - tails.size))
    e2_tail = r_unit**2 * tails
    e2_partial = inv_moment - _partial_sums(L, k_max)
    floor = 64 * np.finfo(float).eps * abs(inv_moment) + abs(inv_moment - series)
    if np.any(e2_partial < -floor):
        raise InconsistentMomentError("partial-sum error norm is negative")
    gap = np.abs(e2_partial - e2_tail)
    if np.any(gap > rtol * e2_tail + floor):
        raise InconsistentMomentError("error-norm routes disagree")
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.full(k_max + 1, np.nan)
        rate[1:] = r_unit[1:] / r_unit[:-1]
    J = None if L.tail is None else L.tail[1] / L.tail[0]
    curve_minres = minres_residuals(r_unit) * scale if with_minres else None
    return PredictionCurve(
        r_norm=scale * r_unit,
        e_norm=scale * np.sqrt(e2_tail),
        e_norm_partial=scale * np.sqrt(np.maximum(e2_partial, 0.0)),
        rate=rate,
        inv_moment=float(inv_moment),
        asymptotic_rate=J,
        minres_r=curve_minres,
        scale=scale,
    )


def minres_residuals(cg_residuals) -> np.ndarray:
    """``(sum_{j<=k} ||r_j^CG||^{-2})^{-1/2}`` from a CG residual curve."""
    r = np.asarray(cg_residuals, dtype=float)
    with np.errstate(divide="ignore"):
        inv = np.where(r > 0, 1.0 / r**2, np.inf)
    return 1.0 / np.sqrt(np.cumsum(inv))


def minres_prediction(L: CholeskyBidiagonal, k_max: int = 30) -> np.ndarray:
    """MINRES ``||r_k|| = (1 + sum_{j=1}^k prod_{l<j} alpha_l^2/beta_l^2)^{-1/2}``."""
    ratios = np.ones(k_max + 1)
    ratios[1:] = _ratios(L, k_max)
    return minres_residuals(np.cumprod(ratios))


def halting_time(curve: PredictionCurve, epsilon: float) -> tuple[HaltingTime, HaltingTime]:
    """Deterministic halting times ``(tau_r, tau_e)``.

    ``tau = min{k : curve_k < epsilon}``. A value equal to ``epsilon``
    within ``1e-12`` relative marks a tie. A finite curve that never drops
    below ``epsilon`` is flagged as saturated.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    out = []
    for values in (curve.r_norm, curve.e_norm):
        below = np.flatnonzero(values < epsilon)
        ties = np.flatnonzero(np.abs(values - epsilon) <= 1e-12 * epsilon)
        if ties.size and (below.size == 0 or ties[0] < below[0]):
            out.append(HaltingTime(epsilon, int(ties[0]), tie=True))
        elif below.size:
            out.append(HaltingTime(epsilon, int(below[0])))
        else:
            out.append(HaltingTime(epsilon, None, saturated=True))
    return out[0], out[1]


def log_halting_estimate(rate: float, epsilon: float) -> int:
    """First approximation ``ceil(log epsilon / log J)``."""
    return int(math.ceil(math.log(epsilon) / math.log(rate)))


def johnstone_cholesky(ell: float, d: float) -> CholeskyBidiagonal:
    """Explicit factor for ``Sigma = I + ell v v^T`` with ``b = v``."""
    if not 0 < d < 1:
        raise ValueError("d must lie in (0, 1)")
    return CholeskyBidiagonal(np.array([math.sqrt(1 + ell)]), np.array([math.sqrt(d)]), (1.0, math.sqrt(d)))


def johnstone_closed_form(ell: float, d: float, k) -> tuple[np.ndarray, np.ndarray]:
    """``||r_k|| = sqrt(d/(1+ell)) d^{(k-1)/2}``, ``||e_k||_W = ||r_k|| / sqrt(1-d)`` for ``k >= 1``.

    At ``k = 0`` the values are ``1`` and ``sqrt(m)`` with
    ``m = 1 / ((1 + ell)(1 - d))``.
    """
    if not 0 < d < 1:
        raise ValueError("d must lie in (0, 1)")
    k = np.asarray(k)
    kk = np.maximum(k, 1).astype(float)
    r = np.sqrt(d / (1 + ell)) * d ** ((kk - 1) / 2)
    e = r / math.sqrt(1 - d)
    m0 = 1 / ((1 + ell) * (1 - d))
    r = np.where(k == 0, 1.0, r)
    e = np.where(k == 0, math.sqrt(m0), e)
    return r, e


def chebyshev_bound(lam_min: float, lam_max: float, k) -> np.ndarray:
    """``2 ((sqrt lmax - sqrt lmin)/(sqrt lmax + sqrt lmin))^k``."""
    if not 0 < lam_min < lam_max:
        raise ValueError("need 0 < lam_min < lam_max")
    base = (math.sqrt(lam_max) - math.sqrt(lam_min)) / (math.sqrt(lam_max) + math.sqrt(lam_min))
    return 2.0 * base ** np.asarray(k, dtype=float)


@dataclass(frozen=True, eq=False)
class Estimate:
    """End-to-end deterministic prediction for one model.

    Attributes
    ----------
    curve : PredictionCurve
    jacobi : JacobiOperator
        Tail-attached recurrence of the measure.
    cholesky : CholeskyBidiagonal
    support : BulkSupport
    outliers : OutlierSet
    w : float or None
        Normal-equation scale, ``None`` otherwise.
    inv_moment_contour : float or None
        The contour value of the inverse moment used to cross-check the
        Cholesky series.
    """

    curve: PredictionCurve
    jacobi: JacobiOperator
    cholesky: CholeskyBidiagonal
    support: BulkSupport
    outliers: OutlierSet
    w: float | None = None
    inv_moment_contour: float | None = None


def _finish(measure, support, k_max, n_recurrence, inv_moment, scale):
    tail = asymptotic_jacobi(support)
    T = recurrence_from_discretized(measure, n_recurrence).attach_tail(tail)
    L = jacobi_cholesky(T)
    return T, L, cg_prediction(L, inv_moment, k_max, scale=scale)


def estimate_vesd(
    vesd: VesdSpec, k_max: int = 30, *, n_nodes: int = 400, n_recurrence: int = 60
) -> Estimate:
    """Prediction for a deterministic ``b``: discretize, recur, attach tail, factor.

    The Cholesky series for ``m`` is checked against the contour value of
    the ``k = -1`` moment when the latter is available.
    """
    spec = vesd.spectrum
    support = find_bulk_edges(spec)
    outliers = outlier_locations(spec, support) if vesd.mode == "spiked" else OutlierSet()
    measure = discretize_vesd(vesd, n_nodes, support=support)
    m_contour = None
    if support.gamma_minus >= spec.tau:
        m_contour = moments_contour(vesd, -1, -1, support=support)[-1]
    T, L, curve = _finish(measure, support, k_max, n_recurrence, m_contour, 1.0)
    return Estimate(curve, T, L, support, outliers, None, m_contour)


def estimate_normal_equation(
    spec: PopulationSpectrum, k_max: int = 30, *, n_nodes: int = 400, n_recurrence: int = 60
) -> Estimate:
    """Prediction for ``b = Y a``: the measure is ``lambda varrho / w``, curves scale by ``sqrt(w)``."""
    ne = normal_eq_measure(spec, k_max=1)
    measure = discretize(ne.density, ne.support, (), n_nodes)
    T, L, curve = _finish(measure, ne.support, k_max, n_recurrence, ne.inv_moment, math.sqrt(ne.w))
    return Estimate(curve, T, L, ne.support, OutlierSet(), ne.w, ne.inv_moment)
