"""Population spectra and the deformed Marchenko-Pastur law.

A population spectrum is stored as distinct eigenvalues ``sigma`` with
probability weights ``weights``. A finite population of size ``N`` uses
weights ``multiplicity / N``; a limiting population is represented by a
quadrature rule for its spectral distribution. Either way

    f(x) = -1/x + c * sum_k weights_k / (x + 1/sigma_k),

and the Stieltjes transform ``m`` of the companion law solves ``f(m) = z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import eigvalsh, toeplitz
from scipy.optimize import brentq

from .errors import (
    BracketError,
    BranchError,
    ConvergenceError,
    PoleProximityError,
    UnsupportedRegimeError,
)

__all__ = [
    "Spike",
    "PopulationSpectrum",
    "BulkSupport",
    "Outlier",
    "OutlierSet",
    "f_eval",
    "f_prime",
    "f_second",
    "stieltjes_m",
    "find_bulk_edges",
    "bulk_density",
    "outlier_locations",
    "mp_edges",
    "product_mp_edges",
    "identity_population",
    "mp_population",
    "uniform_population",
    "ar1_population",
    "finite_population",
    "mp_quantiles",
    "uniform_quantiles",
    "ar1_covariance",
    "ar1_eigenvalues",
]


@dataclass(frozen=True)
class Spike:
    """Multiplicative spike ``sigma_tilde = (1 + strength) * sigma[index]``.

    ``index`` refers to the distinct, descending ``sigma`` array of the
    owning :class:`PopulationSpectrum`.
    """

    index: int
    strength: float

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("spike index must be nonnegative")
        if not self.strength > 0:
            raise ValueError("spike strength must be positive")


@dataclass(frozen=True, eq=False)
class PopulationSpectrum:
    """Population eigenvalues, their weights, spikes and aspect ratio.

    Parameters
    ----------
    sigma : array_like
        Population eigenvalues. Duplicates are merged and the result is
        stored in non-increasing order.
    weights : array_like
        Nonnegative weights of each entry of ``sigma``; normalized to sum 1.
    aspect_ratio : float
        ``c = N / M``.
    spikes : tuple of Spike
        Spikes, indexed into the merged ``sigma`` array. Several spikes may
        share an index (distinct eigenvectors of one population eigenvalue).
    sample_count : int, optional
        ``M`` when the spectrum comes from a finite model.
    tau : float
        Regularity constant; ``sigma`` must lie in ``[tau, 1/tau]`` and so
        must ``aspect_ratio``.
    """

    sigma: np.ndarray
    weights: np.ndarray
    aspect_ratio: float
    spikes: tuple[Spike, ...] = field(default=())
    sample_count: int | None = None
    tau: float = 1e-3

    def __post_init__(self) -> None:
        sigma = np.asarray(self.sigma, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if sigma.size == 0 or sigma.shape != weights.shape:
            raise ValueError("sigma and weights must be non-empty and aligned")
        if np.any(weights < 0) or not weights.sum() > 0:
            raise ValueError("weights must be nonnegative with positive sum")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if np.any(sigma < self.tau) or np.any(sigma > 1 / self.tau):
            raise ValueError("sigma entries must lie in [tau, 1/tau]")
        c = float(self.aspect_ratio)
        if not self.tau <= c <= 1 / self.tau:
            raise ValueError("aspect ratio must lie in [tau, 1/tau]")
        keep = weights > 0
        values, inverse = np.unique(sigma[keep], return_inverse=True)
        merged = np.bincount(inverse, weights=weights[keep])
        values, merged = values[::-1].copy(), merged[::-1].copy()
        merged /= merged.sum()
        spikes = tuple(self.spikes)
        if any(spike.index >= values.size for spike in spikes):
            raise ValueError("spike index out of range")
        object.__setattr__(self, "sigma", values)
        object.__setattr__(self, "weights", merged)
        object.__setattr__(self, "aspect_ratio", c)
        object.__setattr__(self, "spikes", spikes)

    @property
    def inv_sigma(self) -> np.ndarray:
        return 1.0 / self.sigma

    @property
    def sigma_tilde(self) -> np.ndarray:
        """Spiked eigenvalues, one per spike."""
        return np.array([(1 + s.strength) * self.sigma[s.index] for s in self.spikes])

    @property
    def mean_sigma(self) -> float:
        return float(np.dot(self.weights, self.sigma))

    @property
    def average_trace(self) -> float:
        """``(1/M) sum_i sigma_i = c * mean(sigma)``."""
        return self.aspect_ratio * self.mean_sigma

    @property
    def scale(self) -> float:
        """A bound on the right edge of the bulk."""
        return float(self.sigma[0] * (1 + np.sqrt(self.aspect_ratio)) ** 2)

    def with_spikes(self, spikes: tuple[Spike, ...] | list[Spike]) -> PopulationSpectrum:
        return PopulationSpectrum(
            self.sigma, self.weights, self.aspect_ratio, tuple(spikes), self.sample_count, self.tau
        )

    def without_spikes(self) -> PopulationSpectrum:
        return self.with_spikes(())


@dataclass(frozen=True)
class BulkSupport:
    """Edges of the bulk and the critical points of ``f`` they come from."""

    gamma_minus: float
    gamma_plus: float
    x_minus: float
    x_plus: float
    f2_minus: float = float("nan")
    f2_plus: float = float("nan")

    def __post_init__(self) -> None:
        if not 0 <= self.gamma_minus < self.gamma_plus:
            raise ValueError("edges must satisfy 0 <= gamma_minus < gamma_plus")

    @property
    def width(self) -> float:
        return self.gamma_plus - self.gamma_minus

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x > self.gamma_minus) & (x < self.gamma_plus)


@dataclass(frozen=True)
class Outlier:
    index: int
    strength: float
    sigma_tilde: float
    location: float
    supercritical: bool


@dataclass(frozen=True)
class OutlierSet:
    """Outlier data for every spike of a spectrum."""

    outliers: tuple[Outlier, ...] = ()

    def __len__(self) -> int:
        return len(self.outliers)

    def __iter__(self):
        return iter(self.outliers)

    @property
    def supercritical(self) -> tuple[Outlier, ...]:
        return tuple(o for o in self.outliers if o.supercritical)

    @property
    def locations(self) -> np.ndarray:
        return np.array([o.location for o in self.outliers])


def _as_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if not np.iscomplexobj(arr):
        arr = arr.astype(float)
    return arr, arr.ndim == 0


def _check_poles(spec: PopulationSpectrum, x: np.ndarray, guard: float) -> None:
    tol = guard * spec.inv_sigma[-1]
    if np.any(np.abs(x) <= tol):
        raise PoleProximityError("evaluation point too close to the pole at 0")
    gaps = np.abs(x[..., None] + spec.inv_sigma)
    if np.any(gaps <= tol):
        raise PoleProximityError("evaluation point too close to a pole -1/sigma_k")


def f_eval(spec: PopulationSpectrum, x, *, guard: float = 1e-12):
    """Evaluate ``f(x) = -1/x + c sum_k w_k / (x + 1/sigma_k)``.

    Parameters
    ----------
    spec : PopulationSpectrum
    x : real or complex scalar or array
    guard : float
        Relative distance to a pole below which evaluation is refused.

    Returns
    -------
    Same shape as ``x``.
    """
    arr, scalar = _as_array(x)
    _check_poles(spec, arr, guard)
    t = arr[..., None] + spec.inv_sigma
    out = -1.0 / arr + spec.aspect_ratio * (spec.weights / t).sum(axis=-1)
    return out[()] if scalar else out


def f_prime(spec: PopulationSpectrum, x, *, guard: float = 1e-12):
    """First derivative ``f'(x) = 1/x^2 - c sum_k w_k / (x + 1/sigma_k)^2``."""
    arr, scalar = _as_array(x)
    _check_poles(spec, arr, guard)
    t = arr[..., None] + spec.inv_sigma
    out = 1.0 / arr**2 - spec.aspect_ratio * (spec.weights / t**2).sum(axis=-1)
    return out[()] if scalar else out


def f_second(spec: PopulationSpectrum, x, *, guard: float = 1e-12):
    """Second derivative ``f''(x) = -2/x^3 + 2c sum_k w_k / (x + 1/sigma_k)^3``."""
    arr, scalar = _as_array(x)
    _check_poles(spec, arr, guard)
    t = arr[..., None] + spec.inv_sigma
    out = -2.0 / arr**3 + 2.0 * spec.aspect_ratio * (spec.weights / t**3).sum(axis=-1)
    return out[()] if scalar else out


def _f_and_fprime(
    spec: PopulationSpectrum, m: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values of ``f`` and ``f'`` plus the round-off scale of ``f``."""
    t = m[:, None] + spec.inv_sigma
    q = spec.weights / t
    c = spec.aspect_ratio
    noise = 1.0 / np.abs(m) + c * np.abs(q).sum(axis=1)
    return -1.0 / m + c * q.sum(axis=1), 1.0 / m**2 - c * (q / t).sum(axis=1), noise


def _newton(
    spec: PopulationSpectrum,
    m: np.ndarray,
    target: np.ndarray,
    *,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Damped Newton for ``f(m) = target``, keeping ``Im m > 0`` when ``Im target > 0``."""
    m = m.copy()
    active = np.ones(m.shape, dtype=bool)
    upper = target.imag > 0
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return m
        mi = m[idx]
        val, der, noise = _f_and_fprime(spec, mi)
        resid = val - target[idx]
        settled = np.abs(resid) <= 16 * np.finfo(float).eps * noise
        step = resid / der
        new = mi - step
        for _ in range(60):
            bad = upper[idx] & ~(new.imag > 0)
            if not bad.any():
                break
            step[bad] *= 0.5
            new[bad] = mi[bad] - step[bad]
        m[idx] = new
        done = settled | (np.abs(step) <= tol * np.maximum(np.abs(new), 1e-300))
        active[idx[done]] = False
    if active.any():
        raise ConvergenceError(f"Newton iteration failed at {int(active.sum())} points")
    return m


def stieltjes_m(
    spec: PopulationSpectrum,
    z,
    *,
    support: BulkSupport | None = None,
    on_support: bool = False,
    tol: float = 1e-14,
    max_iter: int = 80,
    ratio: float = 0.2,
):
    """Solve ``f(m) = z`` on the physical branch.

    The root is continued from a point high above ``z`` (where
    ``m ~ -1/z``) straight down to ``z`` through a geometric ladder of
    heights, with Newton's method at each rung. Points below the real axis
    use ``m(conj z) = conj m(z)``.

    Parameters
    ----------
    spec : PopulationSpectrum
    z : complex scalar or array
    support : BulkSupport, optional
        Used to reject real ``z`` on the bulk; computed when needed.
    on_support : bool
        Allow real ``z`` inside the bulk and return the boundary value
        ``m(z + i0)``.
    tol : float
        Relative Newton step tolerance.
    max_iter : int
        Newton iterations per continuation rung.
    ratio : float
        Height ratio between consecutive rungs.

    Returns
    -------
    complex scalar or array
    """
    arr = np.asarray(z, dtype=complex)
    scalar = arr.ndim == 0
    flat = arr.ravel()
    if not on_support and np.any(flat.imag == 0):
        if support is None:
            support = find_bulk_edges(spec)
        real = flat.real[flat.imag == 0]
        guard = 1e-10 * support.gamma_plus
        inside = (real > support.gamma_minus - guard) & (real < support.gamma_plus + guard)
        if np.any(inside):
            raise ValueError("real z on the bulk support requires on_support=True")
    lower = flat.imag < 0
    zz = np.where(lower, flat.conj(), flat)
    top = 4.0 * (spec.scale + 1.0 + np.abs(zz))
    rungs = int(np.ceil(np.log(1e-16) / np.log(ratio)))
    m = -1.0 / (zz + 1j * top)
    for j in range(rungs + 1):
        height = top * ratio**j if j < rungs else 0.0
        m = _newton(spec, m, zz + 1j * height, tol=tol, max_iter=max_iter)
    flip = m.imag < 0
    m[flip] = m[flip].conj()
    if np.any((zz.imag > 0) & (m.imag <= 0)):
        raise BranchError("continued root left the upper half plane")
    m = np.where(lower, m.conj(), m)
    out = m.reshape(arr.shape)
    return out[()] if scalar else out


def _bisect_sign(fun, lo: float, hi: float, want_lo: float, move: str, limit: int = 200) -> float:
    """Move ``lo`` (or ``hi``) until ``fun`` has sign ``want_lo`` there."""
    point = lo if move == "lo" else hi
    for _ in range(limit):
        if np.sign(fun(point)) == want_lo:
            return point
        point = (point + hi) / 2 if move == "lo" else (lo + point) / 2
    raise BracketError("could not establish a sign-changing bracket")


def _count_sign_changes(values: np.ndarray) -> int:
    s = np.sign(values)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def find_bulk_edges(spec: PopulationSpectrum, *, check_regime: bool = True) -> BulkSupport:
    """Locate the critical points ``x_-< x_+`` of ``f`` and the bulk edges.

    ``x_+`` lies in ``(-1/sigma_1, 0)``. For ``c < 1`` the point ``x_-``
    lies in ``(-inf, -1/sigma_N)``; for ``c > 1`` it lies in ``(0, inf)``.

    Raises
    ------
    UnsupportedRegimeError
        If the sign pattern of ``f'`` reveals a support with several
        intervals, or if ``c == 1``.
    BracketError
        If a bracket cannot be established.
    """
    c = spec.aspect_ratio
    p_first = -spec.inv_sigma[0]
    p_last = -spec.inv_sigma[-1]
    fp = lambda x: float(f_prime(spec, x, guard=0.0))  # noqa: E731

    lo = _bisect_sign(fp, p_first * (1 - 1e-6), 0.0, -1.0, "lo")
    hi = _bisect_sign(fp, lo, p_first * 1e-6, 1.0, "hi")
    x_plus = brentq(fp, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)

    if c == 1.0:
        raise UnsupportedRegimeError("c = 1 puts the lower edge at 0")
    if c < 1:
        left = 2.0 * p_last
        for _ in range(200):
            if fp(left) > 0:
                break
            left *= 2.0
        else:
            raise BracketError("no positive f' found left of the poles")
        right = _bisect_sign(fp, left, p_last * (1 + 1e-9), -1.0, "hi")
        x_minus = brentq(fp, left, right, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    else:
        right = -2.0 * p_last
        for _ in range(200):
            if fp(right) < 0:
                break
            right *= 2.0
        else:
            raise BracketError("no negative f' found right of zero")
        left = _bisect_sign(fp, -p_last * 1e-9, right, 1.0, "lo")
        x_minus = brentq(fp, left, right, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)

    if check_regime:
        _check_single_bulk(spec, x_plus, x_minus)

    return BulkSupport(
        gamma_minus=max(float(f_eval(spec, x_minus)), 0.0),
        gamma_plus=float(f_eval(spec, x_plus)),
        x_minus=x_minus,
        x_plus=x_plus,
        f2_minus=float(f_second(spec, x_minus)),
        f2_plus=float(f_second(spec, x_plus)),
    )


def _check_single_bulk(spec: PopulationSpectrum, x_plus: float, x_minus: float) -> None:
    poles = -spec.inv_sigma
    p_first, p_last = poles[0], poles[-1]
    u = np.linspace(0.0, 1.0, 2001)[1:-1]
    right = p_first * (1 - u)
    if _count_sign_changes(f_prime(spec, right, guard=0.0)) != 1:
        raise UnsupportedRegimeError("f' changes sign more than once right of the poles")
    s = np.logspace(-8, 8, 1601)
    if spec.aspect_ratio < 1:
        outer = p_last * (1 + s)
        expected = 1
    else:
        outer = -p_last * s
        expected = 1
    if _count_sign_changes(f_prime(spec, outer, guard=0.0)) != expected:
        raise UnsupportedRegimeError("f' changes sign more than once in the outer region")
    if spec.aspect_ratio > 1:
        left = p_last * (1 + s)
        if np.any(f_prime(spec, left, guard=0.0) > 0):
            raise UnsupportedRegimeError("f' positive left of the poles")
    if poles.size > 1:
        a, b = poles[1:], poles[:-1]
        probes = np.concatenate([a + t * (b - a) for t in (0.25, 0.5, 0.75)])
        if np.any(f_prime(spec, probes, guard=0.0) > 0):
            raise UnsupportedRegimeError("f' positive between poles: support has several intervals")


def bulk_density(
    spec: PopulationSpectrum,
    x,
    *,
    support: BulkSupport | None = None,
    method: str = "boundary",
):
    """Density of the companion law, ``Im m(x + i0) / pi``.

    Parameters
    ----------
    spec : PopulationSpectrum
    x : real scalar or array
    support : BulkSupport, optional
    method : {"boundary", "richardson"}
        ``"boundary"`` continues the root all the way to the real axis.
        ``"richardson"`` extrapolates from two small heights
        ``eta in {1e-4, 5e-5} * width``.

    Returns
    -------
    Nonnegative values, zero outside ``(gamma_-, gamma_+)``.
    """
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    flat = arr.ravel()
    if support is None:
        support = find_bulk_edges(spec)
    out = np.zeros(flat.shape)
    inside = support.contains(flat)
    if np.any(inside):
        pts = flat[inside]
        if method == "boundary":
            m = stieltjes_m(spec, pts + 0j, on_support=True)
            out[inside] = np.maximum(m.imag, 0.0) / np.pi
        elif method == "richardson":
            eta = 1e-4 * support.width
            rho1 = stieltjes_m(spec, pts + 1j * eta).imag / np.pi
            rho2 = stieltjes_m(spec, pts + 0.5j * eta).imag / np.pi
            out[inside] = np.maximum(2 * rho2 - rho1, 0.0)
        else:
            raise ValueError(f"unknown method {method!r}")
    out = out.reshape(arr.shape)
    return out[()] if scalar else out


def outlier_locations(
    spec: PopulationSpectrum, support: BulkSupport | None = None, *, margin: float = 0.0
) -> OutlierSet:
    """Outlier positions ``f(-1/sigma_tilde)`` for every spike.

    A spike is supercritical when ``sigma_tilde > -(1 + margin)/x_+``.
    Subcritical spikes are kept with ``location = gamma_+``.
    """
    if not spec.spikes:
        return OutlierSet()
    if support is None:
        support = find_bulk_edges(spec)
    threshold = -(1.0 + margin) / support.x_plus
    items = []
    for spike, st in zip(spec.spikes, spec.sigma_tilde):
        sup = bool(st > threshold)
        loc = float(f_eval(spec, -1.0 / st)) if sup else support.gamma_plus
        items.append(Outlier(spike.index, spike.strength, float(st), loc, sup))
    return OutlierSet(tuple(items))


def mp_edges(c: float) -> tuple[float, float]:
    """Edges ``(1 -+ sqrt(c))^2`` of the Marchenko-Pastur law."""
    r = np.sqrt(c)
    return (1 - r) ** 2, (1 + r) ** 2


def product_mp_edges(c: float) -> tuple[float, float]:
    """Closed-form edges when the population itself is MP with parameter ``c``.

    With ``a = 1/c > 1`` the edges are
    ``(-1 + 20a + 8a^2 -+ (1 + 8a)^{3/2}) / (8a^2)``.
    """
    if not 0 < c < 1:
        raise ValueError("closed form requires 0 < c < 1")
    a = 1.0 / c
    base = -1 + 20 * a + 8 * a**2
    root = (1 + 8 * a) ** 1.5
    return (base - root) / (8 * a**2), (base + root) / (8 * a**2)


def identity_population(c: float, *, sample_count: int | None = None) -> PopulationSpectrum:
    """Population ``Sigma_0 = I``."""
    return PopulationSpectrum(np.ones(1), np.ones(1), c, sample_count=sample_count)


def _cos_nodes(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) * np.pi / n


def mp_population(shape: float, c: float, n_nodes: int = 200) -> PopulationSpectrum:
    """Limiting population distributed as MP with parameter ``shape <= 1``.

    The rule substitutes ``x = a + 2b cos(theta)`` and applies the midpoint
    rule in ``theta``, which is spectrally accurate for square-root edges.
    """
    if not 0 < shape < 1:
        raise ValueError("population MP shape must lie in (0, 1)")
    a, b = 1 + shape, np.sqrt(shape)
    theta = _cos_nodes(n_nodes)
    x = a + 2 * b * np.cos(theta)
    w = (2 * b * np.sin(theta)) ** 2 / (2 * np.pi * shape * x) * (np.pi / n_nodes)
    return PopulationSpectrum(x, w, c)


def uniform_population(lo: float, hi: float, c: float, n_nodes: int = 64) -> PopulationSpectrum:
    """Limiting population uniform on ``[lo, hi]`` (Gauss-Legendre rule)."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    return PopulationSpectrum((lo + hi) / 2 + (hi - lo) / 2 * t, w / 2, c)


def ar1_population(rho: float, c: float, n_nodes: int = 256) -> PopulationSpectrum:
    """Limiting spectrum of the Toeplitz matrix ``rho^|i-j|``.

    Uses the symbol ``(1 - rho^2) / (1 - 2 rho cos(theta) + rho^2)`` sampled
    at midpoints of ``(0, pi)``.
    """
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    theta = _cos_nodes(n_nodes)
    sym = (1 - rho**2) / (1 - 2 * rho * np.cos(theta) + rho**2)
    return PopulationSpectrum(sym, np.full(n_nodes, 1.0 / n_nodes), c)


def finite_population(
    values, sample_count: int, spikes: tuple[Spike, ...] = (), tau: float = 1e-3
) -> PopulationSpectrum:
    """Population given by ``N`` explicit eigenvalues and ``M`` samples."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    return PopulationSpectrum(
        values, np.full(n, 1.0 / n), n / sample_count, spikes, sample_count, tau
    )


def mp_quantiles(shape: float, n: int) -> np.ndarray:
    """Typical locations ``sigma_i`` with ``mu([sigma_i, gamma_+]) = (i - 1/2)/n``."""
    if not 0 < shape < 1:
        raise ValueError("population MP shape must lie in (0, 1)")
    a, b = 1 + shape, np.sqrt(shape)
    theta = np.linspace(0.0, np.pi, 2**15 + 1)
    x = a + 2 * b * np.cos(theta)
    g = (2 * b * np.sin(theta)) ** 2 / (2 * np.pi * shape * x)
    cdf = cumulative_simpson(g, x=theta, initial=0.0)
    cdf /= cdf[-1]
    levels = (np.arange(1, n + 1) - 0.5) / n
    return a + 2 * b * np.cos(np.interp(levels, cdf, theta))


def uniform_quantiles(lo: float, hi: float, n: int) -> np.ndarray:
    """Typical locations of the uniform law on ``[lo, hi]``, descending."""
    return hi - (np.arange(1, n + 1) - 0.5) / n * (hi - lo)


def ar1_covariance(rho: float, n: int) -> np.ndarray:
    """Toeplitz covariance with entries ``rho^|i-j|``."""
    return toeplitz(rho ** np.arange(n))


def ar1_eigenvalues(rho: float, n: int) -> np.ndarray:
    """Eigenvalues of :func:`ar1_covariance`, descending."""
    return eigvalsh(ar1_covariance(rho, n))[::-1]
