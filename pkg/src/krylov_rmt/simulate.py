"""Random sample covariance ensembles and the Krylov solvers run on them.

Solvers record per-iteration norms. The Jacobi matrix of ``(W, b)`` is
available both from a Householder reduction (the reference, free from the
loss of orthogonality that hits plain Lanczos on spiked matrices) and from
Lanczos with optional full reorthogonalization.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .errors import NotPositiveDefiniteError, UnsupportedRegimeError
from .measures import MomentTable, VesdSpec
from .orthopoly import JacobiOperator
from .spectrum import (
    PopulationSpectrum,
    Spike,
    ar1_covariance,
    ar1_population,
    finite_population,
    identity_population,
    mp_population,
    mp_quantiles,
    uniform_population,
    uniform_quantiles,
)

__all__ = [
    "EntryDistribution",
    "SampleModel",
    "Sample",
    "SolverTrace",
    "LanczosResult",
    "generator",
    "sample_matrix",
    "run_cg",
    "run_minres",
    "householder_tridiagonalize",
    "run_lanczos",
    "empirical_vesd_moments",
    "lambda_max",
]

MEMORY_CAP = 60_000_000

_DISTRIBUTIONS = ("gaussian", "rademacher", "three_point", "uniform_scaled", "custom")
_SIGMAS = ("identity", "mp_quantiles", "uniform_quantiles", "ar1")
_RHS = ("eigenvector", "mixed", "uniform", "normal_equation")


def generator(seed: int) -> np.random.Generator:
    """Counter-based generator; trial ``i`` of a run uses ``base_seed + i``."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class EntryDistribution:
    """Law of the entries of ``X``, scaled to mean 0 and variance ``1/M``.

    Parameters
    ----------
    kind : str
        ``"gaussian"``, ``"rademacher"``, ``"three_point"`` (values
        ``{-sqrt 3, 0, sqrt 3}`` with probabilities ``1/6, 2/3, 1/6``, which
        matches the first four Gaussian moments), ``"uniform_scaled"`` or
        ``"custom"``.
    values, probs : tuple of float
        Atoms of a ``"custom"`` law; they are standardized to mean 0 and
        variance 1 before scaling.
    """

    kind: str = "gaussian"
    values: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in _DISTRIBUTIONS:
            raise ValueError(f"distribution kind must be one of {_DISTRIBUTIONS}")
        if self.kind == "custom":
            v, p = np.asarray(self.values, float), np.asarray(self.probs, float)
            if v.size < 2 or v.shape != p.shape or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise ValueError("custom law needs matching values and probabilities")
            mean = p @ v
            if p @ (v - mean) ** 2 <= 0:
                raise ValueError("custom law must be non-degenerate")

    def _atoms(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.kind == "rademacher":
            return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
        if self.kind == "three_point":
            r = math.sqrt(3.0)
            return np.array([-r, 0.0, r]), np.array([1 / 6, 2 / 3, 1 / 6])
        if self.kind == "custom":
            v, p = np.asarray(self.values, float), np.asarray(self.probs, float)
            v = v - p @ v
            return v / math.sqrt(p @ v**2), p
        return None

    def standardized_moments(self) -> tuple[float, float, float, float]:
        """First four moments of the unscaled (variance one) law."""
        atoms = self._atoms()
        if atoms is None:
            return (0.0, 1.0, 0.0, 3.0) if self.kind == "gaussian" else (0.0, 1.0, 0.0, 1.8)
        v, p = atoms
        return tuple(float(p @ v**j) for j in range(1, 5))

    def sample(self, rng: np.random.Generator, shape: tuple[int, int], m: int) -> np.ndarray:
        scale = 1.0 / math.sqrt(m)
        if self.kind == "gaussian":
            return rng.standard_normal(shape) * scale
        if self.kind == "uniform_scaled":
            r = math.sqrt(3.0)
            return rng.uniform(-r, r, size=shape) * scale
        v, p = self._atoms()
        return v[rng.choice(v.size, size=shape, p=p)] * scale


@dataclass(frozen=True)
class SampleModel:
    """Finite-``N`` ensemble ``W = Sigma^{1/2} X X^T Sigma^{1/2}`` and a right-hand side.

    Parameters
    ----------
    n, m : int
        Dimensions ``N`` and ``M``.
    sigma : str
        ``"identity"``, ``"mp_quantiles"`` (``shape``),
        ``"uniform_quantiles"`` (``lo``, ``hi``) or ``"ar1"`` (``rho``).
    params : mapping
        Parameters of the ``sigma`` family.
    spikes : tuple of (int, float)
        ``(coordinate, d)``: the population eigenvalue on that coordinate is
        multiplied by ``1 + d``. Not available for ``"ar1"``.
    rhs : str
        ``"eigenvector"`` (``index``), ``"mixed"`` (``coeffs``: coordinate
        to coefficient, the rest of the norm uniform on the sphere
        orthogonal to those coordinates), ``"uniform"`` or
        ``"normal_equation"`` (``b = Y a``, ``a`` uniform on the unit sphere
        of ``R^M``).
    rhs_params : mapping
    allow_wide : bool
        Permit ``N > M``.
    """

    n: int
    m: int
    sigma: str = "identity"
    params: Mapping = field(default_factory=dict)
    spikes: tuple[tuple[int, float], ...] = ()
    rhs: str = "uniform"
    rhs_params: Mapping = field(default_factory=dict)
    allow_wide: bool = False

    def __post_init__(self) -> None:
        if self.sigma not in _SIGMAS:
            raise ValueError(f"sigma must be one of {_SIGMAS}")
        if self.rhs not in _RHS:
            raise ValueError(f"rhs must be one of {_RHS}")
        if self.n < 1 or self.m < 1:
            raise ValueError("dimensions must be positive")
        if self.n > self.m and not self.allow_wide:
            raise UnsupportedRegimeError("N > M requires allow_wide")
        if self.n * max(self.m, self.n) > MEMORY_CAP:
            raise MemoryError("N * M exceeds the configured memory cap")
        spikes = tuple((int(i), float(d)) for i, d in self.spikes)
        if self.sigma == "ar1" and spikes:
            raise UnsupportedRegimeError("spikes are not supported on the Toeplitz family")
        if any(not 0 <= i < self.n for i, _ in spikes) or len({i for i, _ in spikes}) < len(spikes):
            raise ValueError("spike coordinates must be distinct and in range")
        object.__setattr__(self, "spikes", spikes)
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "rhs_params", dict(self.rhs_params))

    @property
    def aspect_ratio(self) -> float:
        return self.n / self.m

    def without_spikes(self) -> SampleModel:
        return replace(self, spikes=())

    def population_values(self) -> np.ndarray:
        """Diagonal of ``Sigma_0`` (eigenvalues for ``"ar1"``), spikes excluded."""
        p = self.params
        if self.sigma == "identity":
            return np.ones(self.n)
        if self.sigma == "mp_quantiles":
            return mp_quantiles(float(p["shape"]), self.n)
        if self.sigma == "uniform_quantiles":
            return uniform_quantiles(float(p["lo"]), float(p["hi"]), self.n)
        return np.linalg.eigvalsh(ar1_covariance(float(p["rho"]), self.n))[::-1]

    def sigma_sqrt(self) -> np.ndarray:
        """``Sigma^{1/2}`` as a vector (diagonal families) or a dense matrix."""
        if self.sigma == "ar1":
            vals, vecs = np.linalg.eigh(ar1_covariance(float(self.params["rho"]), self.n))
            return (vecs * np.sqrt(vals)) @ vecs.T
        diag = self.population_values().copy()
        for i, d in self.spikes:
            diag[i] *= 1 + d
        return np.sqrt(diag)

    def population(self, *, finite: bool = False) -> PopulationSpectrum:
        """Limiting population (or the finite one of this ``N``) with spikes attached."""
        c = self.aspect_ratio
        p = self.params
        if finite:
            base = finite_population(self.population_values(), self.m)
        elif self.sigma == "identity":
            base = identity_population(c)
        elif self.sigma == "mp_quantiles":
            base = mp_population(float(p["shape"]), c)
        elif self.sigma == "uniform_quantiles":
            base = uniform_population(float(p["lo"]), float(p["hi"]), c)
        else:
            base = ar1_population(float(p["rho"]), c)
        if not self.spikes:
            return base
        if self.sigma != "identity" and not finite:
            raise UnsupportedRegimeError("limiting spiked populations need Sigma_0 = I")
        values = self.population_values()
        spikes = [Spike(int(np.argmin(np.abs(base.sigma - values[i]))), d) for i, d in self.spikes]
        return base.with_spikes(spikes)

    def vesd(self, *, mode: str | None = None, finite: bool = False) -> VesdSpec:
        """Limiting description of ``b`` in the population eigenbasis.

        Only families whose eigenvectors are the coordinate axes are
        supported for non-uniform right-hand sides.
        """
        spec = self.population(finite=finite)
        mode = mode or ("spiked" if self.spikes else "plain")
        if self.rhs == "normal_equation":
            return VesdSpec(spec, None, None, "normal_equation")
        if self.rhs == "uniform":
            return VesdSpec.isotropic(spec, mode)
        if self.sigma == "ar1":
            raise UnsupportedRegimeError("coordinate right-hand sides need a diagonal Sigma_0")
        spike_pos = {i: k for k, (i, _) in enumerate(self.spikes)}
        if self.rhs == "eigenvector":
            coeffs = {int(self.rhs_params.get("index", 0)): 1.0}
        else:
            coeffs = {int(i): float(v) for i, v in self.rhs_params["coeffs"].items()}
        values = self.population_values()
        sb2 = np.zeros(len(self.spikes))
        b2 = np.zeros(spec.sigma.size)
        rest = 1.0
        for i, coef in coeffs.items():
            rest -= coef**2
            if i in spike_pos:
                sb2[spike_pos[i]] += coef**2
            else:
                b2[int(np.argmin(np.abs(spec.sigma - values[i])))] += coef**2
        if self.rhs == "mixed" and rest > 1e-15:
            b2 += rest * spec.weights
        return VesdSpec(spec, b2, sb2, mode)


@dataclass(frozen=True, eq=False)
class Sample:
    """One draw: ``W``, the factor ``Y = Sigma^{1/2} X`` and the right-hand side."""

    W: np.ndarray
    Y: np.ndarray
    b: np.ndarray
    seed: int


def _apply_sqrt(root: np.ndarray, x: np.ndarray) -> np.ndarray:
    return root[:, None] * x if root.ndim == 1 else root @ x


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_matrix(model: SampleModel, dist: EntryDistribution, seed: int) -> Sample:
    """Draw ``X`` and the right-hand side from ``generator(seed)``.

    ``X`` is drawn first and the right-hand side second, so a model and its
    spike-free counterpart share both for the same seed.
    """
    rng = generator(seed)
    x = dist.sample(rng, (model.n, model.m), model.m)
    y = _apply_sqrt(model.sigma_sqrt(), x)
    n = model.n
    if model.rhs == "normal_equation":
        a = _unit(rng.standard_normal(model.m))
        b = y @ a
    elif model.rhs == "uniform":
        b = _unit(rng.standard_normal(n))
    elif model.rhs == "eigenvector":
        b = np.zeros(n)
        b[int(model.rhs_params.get("index", 0))] = 1.0
    else:
        coeffs = {int(i): float(v) for i, v in model.rhs_params["coeffs"].items()}
        rest = 1.0 - sum(v**2 for v in coeffs.values())
        if rest < -1e-12:
            raise ValueError("mixed coefficients exceed unit norm")
        w = rng.standard_normal(n)
        w[list(coeffs)] = 0.0
        b = math.sqrt(max(rest, 0.0)) * _unit(w)
        for i, v in coeffs.items():
            b[i] = v
    return Sample(y @ y.T, y, b, int(seed))


@dataclass(frozen=True, eq=False)
class SolverTrace:
    """Per-iteration norms of one solver run, ``k = 0 .. len - 1``."""

    residual: np.ndarray
    error: np.ndarray | None
    lanczos_a: np.ndarray
    lanczos_b: np.ndarray
    solver: str
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return self.residual.size - 1


def _w_norm_factory(W: np.ndarray, b: np.ndarray, x_true, method: str):
    if method not in ("solution", "residual"):
        raise ValueError("error method must be 'solution' or 'residual'")
    factor = cho_factor(W)
    if method == "residual":
        return lambda x, r: math.sqrt(max(float(r @ cho_solve(factor, r)), 0.0))
    sol = cho_solve(factor, b) if x_true is None else np.asarray(x_true, float)

    def norm(x, r):
        e = sol - x
        return math.sqrt(max(float(e @ (W @ e)), 0.0))

    return norm


def run_cg(
    W: np.ndarray,
    b: np.ndarray,
    k_max: int,
    true_solution: np.ndarray | None = None,
    *,
    errors: bool = True,
    error_method: str = "solution",
    floor: float = 1e-300,
) -> SolverTrace:
    """Hestenes-Stiefel conjugate gradients from ``x_0 = 0``.

    ``||e_k||_W`` is computed from the dense solution (``"solution"``) or as
    ``sqrt(r_k^T W^{-1} r_k)`` from the recursively updated residual
    (``"residual"``), which does not suffer from cancellation once
    ``x_k`` is close to the solution. The Lanczos coefficients implied by
    the step lengths are recorded as well.

    Raises
    ------
    NotPositiveDefiniteError
        If ``p^T W p <= 0`` or the Cholesky factorization of ``W`` fails.
    """
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        err = _w_norm_factory(W, b, true_solution, error_method) if errors else None
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("W is not positive definite") from exc
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    res = [math.sqrt(rr)]
    errs = [err(x, r)] if err else None
    a_coef, b_coef = [], []
    step_prev, beta_prev = None, 0.0
    for _ in range(k_max):
        if math.sqrt(rr) <= floor:
            break
        wp = W @ p
        pwp = float(p @ wp)
        if pwp <= 0:
            raise NotPositiveDefiniteError("p^T W p <= 0 during CG")
        step = rr / pwp
        x = x + step * p
        r = r - step * wp
        rr_new = float(r @ r)
        beta = rr_new / rr
        a_coef.append(1.0 / step + (beta_prev / step_prev if step_prev else 0.0))
        b_coef.append(math.sqrt(beta) / step)
        p = r + beta * p
        rr, step_prev, beta_prev = rr_new, step, beta
        res.append(math.sqrt(rr))
        if err:
            errs.append(err(x, r))
    return SolverTrace(
        np.array(res),
        None if errs is None else np.array(errs),
        np.array(a_coef),
        np.array(b_coef),
        "cg",
    )


def run_minres(
    W: np.ndarray, b: np.ndarray, k_max: int, *, reorthogonalize: bool = True
) -> SolverTrace:
    """MINRES via Lanczos and Givens rotations from ``x_0 = 0``.

    Returns the residual norms ``|phi_bar_k|`` of the rotated least-squares
    problem, which equal ``min ||b - W x||`` over the ``k``-th Krylov space.
    """
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    beta1 = float(np.linalg.norm(b))
    res = [beta1]
    basis = [b / beta1]
    q_prev = np.zeros_like(b)
    beta = 0.0
    cs_prev2 = cs_prev = 1.0
    sn_prev = 0.0
    phi_bar = beta1
    a_coef, b_coef = [], []
    for k in range(k_max):
        q = basis[-1]
        v = W @ q - beta * q_prev
        alpha = float(q @ v)
        v -= alpha * q
        if reorthogonalize:
            Q = np.array(basis).T
            for _ in range(2):
                v -= Q @ (Q.T @ v)
        beta_next = float(np.linalg.norm(v))
        a_coef.append(alpha)
        b_coef.append(beta_next)
        # only the part of column k that feeds the new rotation is needed
        delta = cs_prev2 * beta
        gamma_bar = -sn_prev * delta + cs_prev * alpha
        gamma = math.hypot(gamma_bar, beta_next)
        if gamma == 0:
            break
        cs, sn = gamma_bar / gamma, beta_next / gamma
        phi_bar = -sn * phi_bar
        res.append(abs(phi_bar))
        if beta_next <= 1e-14 * max(abs(alpha), 1.0):
            break
        q_prev = q
        basis.append(v / beta_next)
        beta = beta_next
        cs_prev2, cs_prev, sn_prev = cs_prev, cs, sn
    return SolverTrace(np.array(res), None, np.array(a_coef), np.array(b_coef), "minres")


def householder_tridiagonalize(
    W: np.ndarray, b: np.ndarray, n: int | None = None, *, breakdown: float = 1e-13
) -> JacobiOperator:
    """Leading ``n x n`` Jacobi block of ``(W, b)`` by Householder reflections.

    A first reflector maps ``b`` to ``f_1``; the usual column-by-column
    reduction of the transformed matrix then never touches row 0, so the
    orthogonal similarity keeps ``b`` as its first column. Offdiagonals are
    taken in absolute value (a diagonal sign similarity). The reduction
    stops after ``n`` columns or at an offdiagonal below ``breakdown``
    times ``||W||``.
    """
    A = np.array(W, dtype=float, copy=True)
    size = A.shape[0]
    n = size if n is None else min(n, size)
    u = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = u.copy()
    v[0] += math.copysign(1.0, u[0]) if u[0] != 0 else 1.0
    v /= np.linalg.norm(v)
    A -= 2 * np.outer(v, v @ A)
    A -= 2 * np.outer(A @ v, v)
    scale = float(np.abs(A).max())
    diag, off = [], []
    for j in range(n):
        diag.append(A[j, j])
        if j == size - 1 or len(diag) == n:
            break
        x = A[j + 1 :, j].copy()
        norm = float(np.linalg.norm(x))
        if norm <= breakdown * scale:
            break
        off.append(norm)
        h = x
        h[0] += math.copysign(norm, x[0]) if x[0] != 0 else norm
        h /= np.linalg.norm(h)
        sub = A[j + 1 :, j:]
        sub -= 2 * np.outer(h, h @ sub)
        A[j:, j + 1 :] -= 2 * np.outer(A[j:, j + 1 :] @ h, h)
    return JacobiOperator(np.array(diag), np.array(off[: len(diag) - 1]))


@dataclass(frozen=True, eq=False)
class LanczosResult:
    """Lanczos coefficients and the orthogonality loss ``max |Q^T Q - I|``."""

    jacobi: JacobiOperator
    orthogonality_loss: float
    next_offdiag: float | None = None


def run_lanczos(
    W: np.ndarray,
    b: np.ndarray,
    n: int,
    *,
    reorthogonalize: bool = True,
    breakdown: float = 1e-13,
) -> LanczosResult:
    """Lanczos iteration started at ``b / ||b||``.

    With ``reorthogonalize`` every new vector is orthogonalized twice
    against the whole basis. The iteration ends cleanly when an offdiagonal
    drops below ``breakdown`` times the norm estimate.
    """
    W = np.asarray(W, dtype=float)
    q = np.asarray(b, dtype=float) / np.linalg.norm(b)
    size = q.size
    n = min(n, size)
    Q = np.zeros((size, n))
    a = np.zeros(n)
    off = np.zeros(n)
    q_prev = np.zeros(size)
    beta = 0.0
    steps = n
    norm_est = 0.0
    for k in range(n):
        Q[:, k] = q
        v = W @ q - beta * q_prev
        a[k] = q @ v
        v -= a[k] * q
        if reorthogonalize:
            for _ in range(2):
                v -= Q[:, : k + 1] @ (Q[:, : k + 1].T @ v)
        off[k] = np.linalg.norm(v)
        norm_est = max(norm_est, abs(a[k]) + off[k] + beta)
        if off[k] <= breakdown * norm_est:
            steps = k + 1
            break
        q_prev, q, beta = q, v / off[k], off[k]
    basis = Q[:, :steps]
    loss = float(np.abs(basis.T @ basis - np.eye(steps)).max())
    nxt = float(off[steps - 1]) if steps == n else None
    return LanczosResult(JacobiOperator(a[:steps], off[: steps - 1]), loss, nxt)


def empirical_vesd_moments(
    W: np.ndarray, b: np.ndarray, k_max: int, *, inverse: bool = True
) -> MomentTable:
    """``b^T W^k b / ||b||^2`` by repeated products; ``k = -1`` by a direct solve."""
    if k_max > 12:
        raise ValueError("empirical moments are limited to k <= 12")
    b = np.asarray(b, dtype=float)
    u = b / np.linalg.norm(b)
    entries = {0: float(u @ u)}
    v = u.copy()
    for k in range(1, k_max + 1):
        v = W @ v
        entries[k] = float(u @ v)
    prov = {k: "power" for k in entries}
    if inverse:
        entries[-1] = float(u @ np.linalg.solve(W, u))
        prov[-1] = "solve"
    entries = dict(sorted(entries.items()))
    return MomentTable(entries, prov)


def lambda_max(W: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    n = W.shape[0]
    return float(eigh(W, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
