"""Limiting spectral measures of ``(W, b)`` and their moments.

Three families of measures are handled:

* the plain VESD of a deterministic unit vector ``b``,
* its spiked counterpart, built from the deterministic equivalent of the
  spiked resolvent,
* the normal-equation measure ``lambda * varrho(lambda)`` of ``b = Y a``.

Moments come from trapezoid rules on ellipses; a cosine-substituted
quadrature of the density feeds the Stieltjes procedure in ``orthopoly``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .errors import ContourError, MomentInconsistencyError, PoleProximityError
from .spectrum import (
    BulkSupport,
    OutlierSet,
    PopulationSpectrum,
    bulk_density,
    f_eval,
    f_prime,
    find_bulk_edges,
    outlier_locations,
    stieltjes_m,
)

__all__ = [
    "VesdSpec",
    "MomentTable",
    "DiscretizedMeasure",
    "Contour",
    "NormalEquationMeasure",
    "rho_b_density",
    "vesd_density",
    "vesd_stieltjes",
    "spiked_vesd_stieltjes",
    "enclosing_contour",
    "moments_contour",
    "spiked_moments_residue",
    "atom_weights",
    "normal_eq_measure",
    "discretize",
    "discretize_vesd",
]

_MODES = ("plain", "spiked", "normal_equation")


@dataclass(frozen=True, eq=False)
class VesdSpec:
    """Right-hand side ``b`` described in the population eigenbasis.

    Parameters
    ----------
    spectrum : PopulationSpectrum
    b2 : array_like
        Squared coefficients ``<b, v_i>^2`` summed over the eigenvectors of
        each distinct ``spectrum.sigma`` value, excluding spike directions.
    spike_b2 : array_like, optional
        Squared coefficients along each spike direction, aligned with
        ``spectrum.spikes``.
    mode : {"plain", "spiked", "normal_equation"}
        ``"plain"`` ignores the spikes (non-spiked model), ``"spiked"``
        applies them. In ``"normal_equation"`` mode ``b`` is not used.
    """

    spectrum: PopulationSpectrum
    b2: np.ndarray | None
    spike_b2: np.ndarray | None = None
    mode: str = "plain"

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        n_spikes = len(self.spectrum.spikes)
        if self.mode == "normal_equation":
            object.__setattr__(self, "b2", None)
            object.__setattr__(self, "spike_b2", None)
            return
        b2 = np.asarray(self.b2, dtype=float).ravel()
        sb2 = np.zeros(n_spikes) if self.spike_b2 is None else np.asarray(self.spike_b2, float)
        if b2.shape != self.spectrum.sigma.shape or sb2.shape != (n_spikes,):
            raise ValueError("coefficient arrays do not match the spectrum")
        if np.any(b2 < 0) or np.any(sb2 < 0):
            raise ValueError("squared coefficients must be nonnegative")
        if abs(b2.sum() + sb2.sum() - 1.0) > 1e-12:
            raise ValueError("b must be a unit vector")
        object.__setattr__(self, "b2", b2)
        object.__setattr__(self, "spike_b2", sb2)

    @classmethod
    def isotropic(cls, spectrum: PopulationSpectrum, mode: str = "plain") -> VesdSpec:
        """``b`` spread over the population eigenvectors like a uniform vector."""
        return cls(spectrum, spectrum.weights.copy(), None, mode)

    @classmethod
    def eigenvector(cls, spectrum: PopulationSpectrum, index: int, mode: str = "plain") -> VesdSpec:
        """``b`` equal to a non-spiked eigenvector with eigenvalue ``sigma[index]``."""
        b2 = np.zeros(spectrum.sigma.size)
        b2[index] = 1.0
        return cls(spectrum, b2, None, mode)

    @classmethod
    def spike_direction(cls, spectrum: PopulationSpectrum, k: int = 0, mode: str = "spiked") -> VesdSpec:
        """``b`` equal to the eigenvector carrying spike ``k``."""
        sb2 = np.zeros(len(spectrum.spikes))
        sb2[k] = 1.0
        return cls(spectrum, np.zeros(spectrum.sigma.size), sb2, mode)

    @classmethod
    def mixed(
        cls,
        spectrum: PopulationSpectrum,
        spike_coeffs: dict[int, float],
        mode: str = "spiked",
    ) -> VesdSpec:
        """Given weights on spike directions, the rest spread isotropically.

        ``spike_coeffs`` maps spike position to the coefficient ``<b, v>``;
        the remaining squared mass ``1 - sum coeff^2`` follows the
        population weights.
        """
        sb2 = np.zeros(len(spectrum.spikes))
        for k, coef in spike_coeffs.items():
            sb2[k] = coef**2
        rest = 1.0 - sb2.sum()
        if rest < -1e-12:
            raise ValueError("spike coefficients exceed unit norm")
        return cls(spectrum, max(rest, 0.0) * spectrum.weights, sb2, mode)

    def spike_sigma(self) -> np.ndarray:
        """Unspiked eigenvalue ``sigma_i`` of each spike direction."""
        return np.array([self.spectrum.sigma[s.index] for s in self.spectrum.spikes])

    def as_plain(self) -> VesdSpec:
        return VesdSpec(self.spectrum, self.b2, self.spike_b2, "plain")


@dataclass(frozen=True)
class MomentTable:
    """Moments ``k -> m_k`` together with the route that produced each."""

    entries: dict[int, float]
    provenance: dict[int, str] = field(default_factory=dict)
    extended: dict = field(default_factory=dict)

    def __getitem__(self, k: int) -> float:
        return self.entries[k]

    def __contains__(self, k: int) -> bool:
        return k in self.entries

    @property
    def k_max(self) -> int:
        return max(self.entries)

    def array(self, k_min: int = 0, k_max: int | None = None) -> np.ndarray:
        k_max = self.k_max if k_max is None else k_max
        return np.array([self.entries[k] for k in range(k_min, k_max + 1)])

    def exact(self, k_min: int = 0, k_max: int | None = None) -> list:
        """Extended-precision values when available, floats otherwise."""
        k_max = self.k_max if k_max is None else k_max
        return [self.extended.get(k, self.entries[k]) for k in range(k_min, k_max + 1)]


@dataclass(frozen=True, eq=False)
class DiscretizedMeasure:
    """Quadrature representation of a measure: bulk nodes plus atoms."""

    nodes: np.ndarray
    weights: np.ndarray
    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape != weights.shape:
            raise ValueError("nodes and weights must align")
        if np.any(weights < 0) or any(w < 0 for _, w in self.atoms):
            raise MomentInconsistencyError("negative quadrature weight")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "atoms", tuple((float(x), float(w)) for x, w in self.atoms))

    @property
    def all_nodes(self) -> np.ndarray:
        return np.concatenate([self.nodes, [x for x, _ in self.atoms]])

    @property
    def all_weights(self) -> np.ndarray:
        return np.concatenate([self.weights, [w for _, w in self.atoms]])

    @property
    def total_mass(self) -> float:
        return float(self.all_weights.sum())

    def moment(self, k: int) -> float:
        return float(np.dot(self.all_weights, self.all_nodes**k))

    def moments(self, k_max: int, k_min: int = 0) -> MomentTable:
        x, w = self.all_nodes, self.all_weights
        entries = {k: float(np.dot(w, x**k)) for k in range(k_min, k_max + 1)}
        return MomentTable(entries, {k: "discretized" for k in entries})


@dataclass(frozen=True, eq=False)
class Contour:
    """Trapezoid rule on the ellipse ``center + A cos t + i B sin t`` (counterclockwise)."""

    center: complex
    semi_axes: tuple[float, float]
    node_count: int
    nodes: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        a, b = self.semi_axes
        if not (a > 0 and b > 0 and self.node_count >= 4):
            raise ValueError("need positive semi-axes and at least 4 nodes")
        t = 2 * np.pi * (np.arange(self.node_count) + 0.5) / self.node_count
        z = self.center + a * np.cos(t) + 1j * b * np.sin(t)
        w = (-a * np.sin(t) + 1j * b * np.cos(t)) * (2 * np.pi / self.node_count)
        object.__setattr__(self, "nodes", z)
        object.__setattr__(self, "weights", w)

    def refined(self, node_count: int) -> Contour:
        return Contour(self.center, self.semi_axes, node_count)

    def encloses(self, x: float) -> bool:
        a, b = self.semi_axes
        return ((x - self.center.real) / a) ** 2 + (self.center.imag / b) ** 2 < 1

    def integrate(self, values: np.ndarray) -> complex:
        """``oint g dz`` given ``values = g(nodes)``."""
        return complex(np.dot(self.weights, values))


@dataclass(frozen=True, eq=False)
class NormalEquationMeasure:
    """Measure of ``b = Y a`` for the normal equations.

    Attributes
    ----------
    w : float
        ``(1/M) sum_i sigma_i``, the limit of ``||Y a||^2``.
    moments : MomentTable
        ``k -> w^{-1/2} int lambda^{k+1} varrho(d lambda)``.
    bulk_mass : float
        Mass of the companion law away from zero, ``min(c, 1)``.
    support : BulkSupport
    spectrum : PopulationSpectrum
        Spikes removed.
    """

    w: float
    moments: MomentTable
    bulk_mass: float
    support: BulkSupport
    spectrum: PopulationSpectrum

    @property
    def inv_moment(self) -> float:
        """Inverse moment of the normalized measure ``lambda varrho / w``."""
        return self.bulk_mass / self.w

    def density(self, x) -> np.ndarray:
        """Density of the normalized measure ``lambda varrho(lambda) / w``."""
        x = np.asarray(x, dtype=float)
        return x * bulk_density(self.spectrum, x, support=self.support) / self.w

    def normalized_moment(self, k: int) -> float:
        """``int x^k lambda varrho / w`` for ``k >= -1``."""
        return self.moments[k] / np.sqrt(self.w)


def _boundary_m(spec: PopulationSpectrum, x: np.ndarray) -> np.ndarray:
    return stieltjes_m(spec, np.asarray(x, dtype=float) + 0j, on_support=True)


def rho_b_density(vesd: VesdSpec, x, support: BulkSupport | None = None):
    """Plain VESD density ``(varrho/x) sum_i b_i^2 sigma_i / |1 + sigma_i m|^2``."""
    if vesd.mode == "normal_equation":
        raise ValueError("rho_b is defined for a deterministic b")
    spec = vesd.spectrum
    support = find_bulk_edges(spec) if support is None else support
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    flat = arr.ravel()
    out = np.zeros(flat.shape)
    inside = support.contains(flat)
    if np.any(inside):
        pts = flat[inside]
        m = _boundary_m(spec, pts)
        sig = np.concatenate([spec.sigma, vesd.spike_sigma()])
        b2 = np.concatenate([vesd.b2, vesd.spike_b2])
        ratio = (b2 * sig / np.abs(1 + np.outer(m, sig)) ** 2).sum(axis=1)
        out[inside] = np.maximum(m.imag, 0.0) / np.pi / pts * ratio
    out = out.reshape(arr.shape)
    return out[()] if scalar else out


def vesd_stieltjes(vesd: VesdSpec, z, *, m=None):
    """Deterministic equivalent ``-(1/z) sum_i b_i^2 / (1 + sigma_i m(z))``."""
    spec = vesd.spectrum
    z = np.asarray(z, dtype=complex)
    m = stieltjes_m(spec, z) if m is None else np.asarray(m)
    sig = np.concatenate([spec.sigma, vesd.spike_sigma()])
    b2 = np.concatenate([vesd.b2, vesd.spike_b2])
    s = (b2 / (1 + m[..., None] * sig)).sum(axis=-1)
    return -s / z


def _spike_correction(z, m, sigma: float, d: float):
    """``L_i(z) = z^{-1} u^2 / (1/d + 1 - u)`` with ``u = 1/(1 + m sigma)``."""
    u = 1.0 / (1.0 + m * sigma)
    return u**2 / (z * (1.0 / d + 1.0 - u))


def spiked_vesd_stieltjes(
    vesd: VesdSpec,
    z,
    *,
    m=None,
    outliers: OutlierSet | None = None,
    guard: float = 1e-9,
):
    """Deterministic equivalent of ``b* G_tilde(z) b`` for the spiked model.

    Equals ``sum_i b_i^2/(1+d_i) (Pi_ii(z) - L_i(z))`` where
    ``Pi_ii = -1/(z (1 + sigma_i m))`` and ``L_i`` vanishes for non-spiked
    directions.

    Raises
    ------
    PoleProximityError
        If ``z`` is within ``guard`` (relative) of an outlier location.
    """
    spec = vesd.spectrum
    z = np.asarray(z, dtype=complex)
    if outliers is None:
        outliers = outlier_locations(spec)
    for o in outliers.supercritical:
        if np.any(np.abs(z - o.location) <= guard * o.location):
            raise PoleProximityError("z too close to an outlier location")
    m = stieltjes_m(spec, z) if m is None else np.asarray(m)
    out = -(vesd.b2 / (1 + m[..., None] * spec.sigma)).sum(axis=-1) / z
    for spike, sig, weight in zip(spec.spikes, vesd.spike_sigma(), vesd.spike_b2):
        if weight == 0:
            continue
        d = spike.strength
        pi = -1.0 / (z * (1 + sig * m))
        out = out + weight / (1 + d) * (pi - _spike_correction(z, m, sig, d))
    return out


def vesd_density(vesd: VesdSpec, x, support: BulkSupport | None = None):
    """Bulk density ``Im S(x + i0) / pi`` for plain or spiked mode."""
    spec = vesd.spectrum
    support = find_bulk_edges(spec) if support is None else support
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    flat = arr.ravel()
    out = np.zeros(flat.shape)
    inside = support.contains(flat)
    if np.any(inside):
        pts = flat[inside]
        m = _boundary_m(spec, pts)
        if vesd.mode == "spiked":
            s = spiked_vesd_stieltjes(vesd, pts + 0j, m=m)
        else:
            s = vesd_stieltjes(vesd, pts + 0j, m=m)
        out[inside] = np.maximum(s.imag, 0.0) / np.pi
    out = out.reshape(arr.shape)
    return out[()] if scalar else out


def enclosing_contour(
    support: BulkSupport,
    atoms=(),
    *,
    include_zero: bool = True,
    node_count: int = 256,
) -> Contour:
    """Ellipse confocal with the segment spanned by the bulk and atoms.

    With ``include_zero`` the ellipse also surrounds the origin; otherwise
    it passes halfway (in the confocal parameter) between the segment and
    the origin, which is required for negative powers.
    """
    lo = support.gamma_minus
    hi = max([support.gamma_plus, *atoms])
    h = (hi - lo) / 2
    center = (hi + lo) / 2
    if include_zero:
        xi = np.arccosh(max(center / h, 1.0)) + 0.75
    else:
        if lo <= 0:
            raise ContourError("cannot separate the origin from the support")
        xi = 0.5 * np.arccosh(center / h)
    return Contour(complex(center), (h * np.cosh(xi), h * np.sinh(xi)), node_count)


def _contour_table(
    stieltjes: Callable[[np.ndarray], np.ndarray],
    contour: Contour,
    ks: range,
    *,
    tol: float,
    node_cap: int,
) -> tuple[dict[int, float], Contour]:
    """Moments ``-(2 pi i)^{-1} oint z^k S(z) dz`` with node doubling.

    Orientation of :class:`Contour` is counterclockwise, so the minus sign
    turns the contour integral of a Stieltjes transform into a moment.
    """
    def table(c: Contour) -> np.ndarray:
        s = stieltjes(c.nodes)
        zk = c.nodes[None, :] ** np.array(list(ks))[:, None]
        vals = -(zk * s[None, :]) @ c.weights / (2j * np.pi)
        return vals.real

    prev = table(contour)
    while True:
        n = 2 * contour.node_count
        if n > node_cap:
            break
        contour = contour.refined(n)
        cur = table(contour)
        if np.all(np.abs(cur - prev) <= tol * np.maximum(1.0, np.abs(cur))):
            return dict(zip(ks, cur)), contour
        prev = cur
    raise ContourError("moment table failed to converge under node doubling")


def _polish_m_mp(spec: PopulationSpectrum, z, m0, mp):
    """Newton refinement of ``f(m) = z`` in the working precision of ``mp``."""
    c = mp.mpf(spec.aspect_ratio)
    inv = [1 / mp.mpf(s) for s in spec.sigma]
    wts = [mp.mpf(w) for w in spec.weights]
    eps = mp.mpf(10) ** (-mp.mp.dps + 5)
    out = []
    for zi, mi in zip(z, m0):
        m = mp.mpc(complex(mi))
        for _ in range(12):
            q = [w / (m + t) for w, t in zip(wts, inv)]
            val = -1 / m + c * mp.fsum(q) - zi
            der = 1 / m**2 - c * mp.fsum(qi / (m + t) for qi, t in zip(q, inv))
            step = val / der
            m -= step
            if abs(step) <= eps * abs(m):
                break
        else:
            raise ContourError("extended-precision Newton polish failed")
        out.append(m)
    return out


def _stieltjes_mp(vesd: VesdSpec, z, m, mp):
    """Plain or spiked deterministic equivalent evaluated with mpmath."""
    spec = vesd.spectrum
    sig = [mp.mpf(s) for s in spec.sigma]
    b2 = [mp.mpf(v) for v in vesd.b2]
    spikes = list(zip(spec.spikes, vesd.spike_sigma(), vesd.spike_b2))
    out = []
    for zi, mi in zip(z, m):
        bulk = -mp.fsum(w / (1 + mi * s) for w, s in zip(b2, sig)) / zi
        for spike, s, weight in spikes:
            if weight == 0:
                continue
            s, weight, d = mp.mpf(s), mp.mpf(weight), mp.mpf(spike.strength)
            u = 1 / (1 + mi * s)
            pi = -u / zi
            if vesd.mode == "spiked":
                bulk += weight / (1 + d) * (pi - u**2 / (zi * (1 / d + 1 - u)))
            else:
                bulk += weight * pi
        out.append(bulk)
    return out


def _contour_table_mp(
    vesd: VesdSpec, contour: Contour, ks: range, *, dps: int, node_cap: int
) -> dict:
    """Extended-precision counterpart of :func:`_contour_table`."""
    import mpmath

    spec = vesd.spectrum
    tol = mpmath.mpf(10) ** (-(dps - 10))
    with mpmath.workdps(dps):
        def table(c: Contour) -> list:
            n = c.node_count
            a, b = (mpmath.mpf(v) for v in c.semi_axes)
            center = mpmath.mpf(c.center.real)
            t = [2 * mpmath.pi * (j + mpmath.mpf(0.5)) / n for j in range(n)]
            z = [center + a * mpmath.cos(tj) + 1j * b * mpmath.sin(tj) for tj in t]
            dz = [(-a * mpmath.sin(tj) + 1j * b * mpmath.cos(tj)) * 2 * mpmath.pi / n for tj in t]
            m = _polish_m_mp(spec, z, stieltjes_m(spec, np.array([complex(v) for v in z])), mpmath)
            s = _stieltjes_mp(vesd, z, m, mpmath)
            g = [sj * dj for sj, dj in zip(s, dz)]
            return [
                (-mpmath.fsum(zj**k * gj for zj, gj in zip(z, g)) / (2j * mpmath.pi)).real
                for k in ks
            ]

        prev = table(contour)
        while True:
            n = 2 * contour.node_count
            if n > node_cap:
                break
            contour = contour.refined(n)
            cur = table(contour)
            if all(abs(x - y) <= tol * max(1, abs(x)) for x, y in zip(cur, prev)):
                return dict(zip(ks, cur))
            prev = cur
    raise ContourError("extended-precision moment table failed to converge")


def moments_contour(
    vesd: VesdSpec,
    k_min: int,
    k_max: int,
    contour: Contour | None = None,
    *,
    support: BulkSupport | None = None,
    tol: float = 1e-10,
    node_start: int = 256,
    node_cap: int = 4096,
    mass_tol: float = 1e-6,
    dps: int | None = None,
) -> MomentTable:
    """Moments of the plain or spiked VESD from contour integrals.

    ``k = -1`` uses a separate contour that excludes the origin. Node
    counts start at ``node_start`` and double until consecutive tables
    agree to ``tol``.

    With ``dps`` set, nonnegative moments are also evaluated with mpmath at
    that many digits (stored in ``MomentTable.extended``); the Hankel route
    needs them once an atom dominates the measure.

    Raises
    ------
    ContourError
        On failed node doubling, if ``|m_0 - 1| > mass_tol``, or if
        ``k = -1`` is requested while ``gamma_-`` is below ``tau`` or
        ``c > 1``.
    """
    if vesd.mode == "normal_equation":
        raise ValueError("use normal_eq_measure for normal-equation moments")
    spec = vesd.spectrum
    extended: dict = {}
    support = find_bulk_edges(spec) if support is None else support
    outliers = outlier_locations(spec, support) if vesd.mode == "spiked" else OutlierSet()
    atoms = [o.location for o in outliers.supercritical]

    if vesd.mode == "spiked":
        def stieltjes(z):
            return spiked_vesd_stieltjes(vesd, z, outliers=outliers)
        route = "contour-spiked"
    else:
        def stieltjes(z):
            return vesd_stieltjes(vesd, z)
        route = "contour"

    entries: dict[int, float] = {}
    lo = max(k_min, 0)
    if k_max >= lo:
        c0 = contour or enclosing_contour(support, atoms, include_zero=True, node_count=node_start)
        vals, c0 = _contour_table(stieltjes, c0, range(lo, k_max + 1), tol=tol, node_cap=node_cap)
        entries.update(vals)
        if dps is not None:
            extended = _contour_table_mp(
                vesd, c0.refined(node_start), range(lo, k_max + 1), dps=dps, node_cap=node_cap
            )
    if k_min <= -1:
        if support.gamma_minus < spec.tau:
            raise ContourError("k = -1 requires gamma_minus >= tau")
        if spec.aspect_ratio > 1:
            raise ContourError("k = -1 diverges: the measure has an atom at the origin")
        c1 = enclosing_contour(support, atoms, include_zero=False, node_count=node_start)
        vals, _ = _contour_table(stieltjes, c1, range(-1, 0), tol=tol, node_cap=node_cap)
        entries.update(vals)
    if 0 in entries and abs(entries[0] - 1.0) > mass_tol:
        raise ContourError(f"mass check failed: m_0 = {entries[0]!r}")
    entries = dict(sorted(entries.items()))
    return MomentTable(entries, {k: route for k in entries}, extended)


def spiked_moments_residue(
    vesd: VesdSpec,
    k_max: int,
    *,
    support: BulkSupport | None = None,
    sign: float = -1.0,
) -> MomentTable:
    """Spiked moments from the closed residue correction.

    For each spike direction ``i`` the plain moment ``m_{k, v_i}`` is
    shifted by ``sign * f'(-1/st) f(-1/st)^{k-1} / sigma_i`` with
    ``st = sigma_tilde_i``, weighted by ``b_i^2 / (1 + d_i)``. The result is
    a diagnostic; compare it with ``moments_contour`` in spiked mode.

    The correction only accounts for the pole of ``L_i`` at the outlier;
    ``L_i`` also has a branch cut along the bulk, which this route omits.
    """
    spec = vesd.spectrum
    support = find_bulk_edges(spec) if support is None else support
    outliers = outlier_locations(spec, support)
    entries = np.zeros(k_max + 1)
    bulk_weight = float(vesd.b2.sum())
    if bulk_weight > 0:
        rest = VesdSpec(spec, vesd.b2 / bulk_weight, np.zeros(len(spec.spikes)), "plain")
        entries += bulk_weight * moments_contour(rest, 0, k_max, support=support).array(0, k_max)
    for k_sp, (spike, sig, weight, o) in enumerate(
        zip(spec.spikes, vesd.spike_sigma(), vesd.spike_b2, outliers)
    ):
        if weight == 0:
            continue
        direction = VesdSpec.spike_direction(spec, k_sp, mode="plain")
        base = moments_contour(direction, 0, k_max, support=support).array(0, k_max)
        if o.supercritical:
            x = -1.0 / o.sigma_tilde
            fp, fv = float(f_prime(spec, x)), float(f_eval(spec, x))
            base = base + sign * fp * fv ** (np.arange(k_max + 1) - 1.0) / sig
        entries += weight / (1 + spike.strength) * base
    table = {k: float(v) for k, v in enumerate(entries)}
    return MomentTable(table, {k: "residue-corrected" for k in table})


def atom_weights(
    vesd: VesdSpec,
    support: BulkSupport | None = None,
    *,
    node_count: int = 128,
) -> tuple[tuple[float, float], ...]:
    """Atoms ``(location, weight)`` of the spiked VESD at supercritical outliers.

    Each weight is minus the residue of the spiked Stieltjes transform,
    computed on a small circle around the outlier.
    """
    if vesd.mode != "spiked":
        return ()
    spec = vesd.spectrum
    support = find_bulk_edges(spec) if support is None else support
    outliers = outlier_locations(spec, support)
    locs = np.array([o.location for o in outliers.supercritical])
    atoms = []
    for k_sp, o in enumerate(outliers):
        if not o.supercritical or vesd.spike_b2[k_sp] == 0:
            continue
        others = np.abs(locs[locs != o.location] - o.location)
        gap = min([o.location - support.gamma_plus, *others])
        radius = 0.5 * gap
        t = 2 * np.pi * (np.arange(node_count) + 0.5) / node_count
        z = o.location + radius * np.exp(1j * t)
        single = np.zeros(len(spec.spikes))
        single[k_sp] = vesd.spike_b2[k_sp]
        part = VesdSpec(spec, np.zeros(spec.sigma.size), single / single.sum(), "spiked")
        s = spiked_vesd_stieltjes(part, z, outliers=outliers)
        residue = np.mean(s * radius * np.exp(1j * t))
        weight = -float(residue.real) * single.sum()
        if weight < -1e-12:
            raise MomentInconsistencyError("negative atom weight")
        atoms.append((o.location, max(weight, 0.0)))
    return tuple(atoms)


def normal_eq_measure(
    spec: PopulationSpectrum,
    k_max: int = 12,
    *,
    support: BulkSupport | None = None,
    tol: float = 1e-10,
    node_start: int = 256,
    node_cap: int = 4096,
) -> NormalEquationMeasure:
    """Normal-equation measure and its moments; spikes are dropped.

    The companion law ``varrho`` has moments ``-(2 pi i)^{-1} oint z^j m(z) dz``
    on a contour around both the bulk and the origin, where its atom of
    mass ``1 - c`` sits when ``c < 1``. The tilt ``lambda varrho`` removes
    that atom, so the ``k = -1`` entry is ``w^{-1/2}`` times the bulk mass.
    """
    spec = spec.without_spikes()
    support = find_bulk_edges(spec) if support is None else support
    w = spec.average_trace
    contour = enclosing_contour(support, include_zero=True, node_count=node_start)

    def stieltjes(z):
        return stieltjes_m(spec, z)

    raw, _ = _contour_table(stieltjes, contour, range(0, k_max + 2), tol=tol, node_cap=node_cap)
    if abs(raw[0] - 1.0) > 1e-6:
        raise ContourError(f"companion mass check failed: {raw[0]!r}")
    bulk_mass = min(spec.aspect_ratio, 1.0)
    scale = 1.0 / np.sqrt(w)
    entries = {-1: scale * bulk_mass}
    entries.update({k: scale * raw[k + 1] for k in range(0, k_max + 1)})
    prov = {k: "contour" for k in entries}
    prov[-1] = "closed-form"
    return NormalEquationMeasure(w, MomentTable(entries, prov), bulk_mass, support, spec)


def discretize(
    density: Callable[[np.ndarray], np.ndarray],
    support: BulkSupport,
    atoms=(),
    n_nodes: int = 400,
    *,
    total: float = 1.0,
) -> DiscretizedMeasure:
    """Quadrature of a square-root-edged density plus atoms.

    Substitutes ``x = a + 2b cos(theta)`` with ``a, b`` from the edges and
    applies the midpoint rule in ``theta``. Atoms given as bare locations
    receive the leftover mass ``total - bulk mass`` (only one such atom is
    allowed); atoms given as ``(location, weight)`` pairs keep their weight.

    Raises
    ------
    MomentInconsistencyError
        If an atom weight comes out negative beyond round-off.
    """
    a = (support.gamma_plus + support.gamma_minus) / 2
    b = (support.gamma_plus - support.gamma_minus) / 4
    theta = (np.arange(n_nodes) + 0.5) * np.pi / n_nodes
    x = a + 2 * b * np.cos(theta)
    w = np.asarray(density(x), dtype=float) * 2 * b * np.sin(theta) * (np.pi / n_nodes)
    out_atoms = []
    bare = [at for at in atoms if np.ndim(at) == 0]
    pairs = [tuple(at) for at in atoms if np.ndim(at) != 0]
    if len(bare) > 1:
        raise ValueError("at most one atom may take the leftover mass")
    out_atoms.extend(pairs)
    if bare:
        leftover = total - w.sum() - sum(p[1] for p in pairs)
        if leftover < -1e-10:
            raise MomentInconsistencyError("leftover atom mass is negative")
        out_atoms.append((float(bare[0]), max(leftover, 0.0)))
    return DiscretizedMeasure(x, w, tuple(out_atoms))


def discretize_vesd(
    vesd: VesdSpec, n_nodes: int = 400, *, support: BulkSupport | None = None
) -> DiscretizedMeasure:
    """Discretize a plain or spiked VESD, atoms weighted by their residues."""
    spec = vesd.spectrum
    support = find_bulk_edges(spec) if support is None else support
    atoms = atom_weights(vesd, support)
    return discretize(lambda x: vesd_density(vesd, x, support), support, atoms, n_nodes)
