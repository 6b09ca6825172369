"""Configuration energies of the determinantal gas.

A model is a bundle degree m > 0 together with a tensor power k such that
n = k m is a nonnegative integer; the gas has N = n + 1 points, one per
holomorphic section z^a (a = 0..n) of the degree-n bundle.  The N-point wave
function is the Slater determinant of those sections, and its pointwise norm
obeys the product identity

    |det S(x_1..x_N)|^2 = prod_{i<j} ch^2(x_i, x_j) * prod_i e^{-k u(x_i)},

where ch^2 is the squared chordal distance and u is the metric perturbation
of the bundle weight; the (1 + |z|^2) powers of the round weight are absorbed
exactly (this is where n = N - 1 enters).  The identity is chart-free, so no
configuration can overflow near either pole.  Changing the section basis by a
matrix M shifts the log norm by log|det M|^2 and nothing else, so bases are
carried as the matrix plus that scalar shift.

The per-particle energy is   E = -log|det S|^2 / (k N)   and the Gibbs law at
inverse temperature beta weights configurations by e^{-beta N E} against the
product base measure dV^N.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .geometry import (
    BaseMeasure,
    BundleMetric,
    SphereGrid,
    SpherePoint,
    WeightedDivisor,
    chordal_sq,
    point_from_xyz,
)

_LOG_PI = math.log(math.pi)
_LOG_2 = math.log(2.0)


class EnergyError(ValueError):
    """Invalid model data or failed energy computation."""


# ----------------------------------------------------------------- model ----

@dataclass(frozen=True)
class ModelSpec:
    """Gas model: bundle degree m, tensor power k, inverse temperature beta.

    k may be fractional, but k * degree must be a positive integer (the
    polynomial degree of the sections); the number of points is k*degree + 1.
    degree defaults to 2 - (divisor weight sum), the anticanonical degree of
    the (log) model; passing it explicitly must agree with the divisor, and a
    plain model (no divisor) only admits integer degrees.  perturbation, if
    given, deforms the bundle weight by u, a callable on (..., 3) unit
    vectors; the per-unit-degree potential is log(1+|z|^2) + u/m.
    """

    k: float
    degree: float | None = None
    beta: float = 1.0
    divisor: WeightedDivisor | None = None
    perturbation: object = None

    def __post_init__(self):
        if not (self.k > 0.0) or not math.isfinite(self.k):
            raise EnergyError(f"k must be positive and finite, got {self.k}")
        if not math.isfinite(self.beta):
            raise EnergyError(f"beta must be finite, got {self.beta}")
        if self.divisor is not None:
            m = 2.0 - self.divisor.total_weight
            if m <= 0.0:
                raise EnergyError(
                    f"divisor weight sum {self.divisor.total_weight} >= 2 "
                    "leaves no positive degree"
                )
            if self.degree is None:
                object.__setattr__(self, "degree", m)
            elif abs(self.degree - m) > 1e-9:
                raise EnergyError(
                    f"degree {self.degree} contradicts divisor degree {m}"
                )
        else:
            if self.degree is None:
                object.__setattr__(self, "degree", 2.0)
            elif not (self.degree > 0.0) or not math.isfinite(self.degree):
                raise EnergyError(f"degree must be positive, got {self.degree}")
            elif abs(self.degree - round(self.degree)) > 1e-9:
                raise EnergyError(
                    f"degree {self.degree} must be an integer without a divisor"
                )
        km = self.k * self.degree
        if abs(km - round(km)) > 1e-9:
            raise EnergyError(
                f"k * degree = {km} must be an integer (sections have integer degree)"
            )
        if round(km) < 1:
            raise EnergyError(f"k * degree = {km} gives fewer than two points")

    @property
    def section_degree(self) -> int:
        return int(round(self.k * self.degree))

    @property
    def n_points(self) -> int:
        return self.section_degree + 1

    @cached_property
    def bundle(self) -> BundleMetric:
        return BundleMetric(degree=self.degree, perturbation=self.perturbation)

    @cached_property
    def base(self) -> BaseMeasure:
        """Reference measure dV: round, or the divisor-adapted density."""
        if self.divisor is None:
            return BaseMeasure("fubini-study")
        return BaseMeasure("log-fano", divisor=self.divisor)


# ---------------------------------------------------------- configurations ----

@dataclass(frozen=True)
class Configuration:
    """An ordered tuple of N >= 2 sphere points; coincidences are legal."""

    points: tuple

    def __post_init__(self):
        pts = tuple(
            p if isinstance(p, SpherePoint) else point_from_xyz(p) for p in self.points
        )
        if len(pts) < 2:
            raise EnergyError("configuration needs at least two points")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_xyz(cls, xyz) -> "Configuration":
        return cls(tuple(np.asarray(xyz, dtype=float).reshape(-1, 3)))

    @classmethod
    def from_chart_coords(cls, coords, chart: int = 0) -> "Configuration":
        return cls(tuple(SpherePoint(chart, complex(c)) for c in coords))

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return np.array([p.xyz for p in self.points])


# ----------------------------------------------------------------- bases ----

@dataclass(frozen=True)
class SectionBasis:
    """Linear combinations of the monomial sections z^a, a = 0..n.

    Row j of `matrix` lists the monomial coefficients of the j-th section.
    log_shift = log|det matrix|^2 is the exact change of the Slater log norm.
    """

    matrix: np.ndarray
    log_shift: float

    @classmethod
    def monomial(cls, section_degree: int) -> "SectionBasis":
        return cls(np.eye(section_degree + 1, dtype=complex), 0.0)

    def compose(self, M) -> "SectionBasis":
        """Apply a further change of basis M on the left."""
        M = np.asarray(M, dtype=complex)
        sign, logdet = np.linalg.slogdet(M)
        if not np.isfinite(logdet):
            raise EnergyError("change of basis matrix is singular")
        return SectionBasis(M @ self.matrix, self.log_shift + 2.0 * logdet)


def basis_change(basis: SectionBasis | None, M, section_degree: int) -> SectionBasis:
    """New basis obtained by applying M to `basis` (monomials if None)."""
    if basis is None:
        basis = SectionBasis.monomial(section_degree)
    return basis.compose(M)


# ------------------------------------------------------------ wave function ----

def _pair_log_dist_sq(p: SpherePoint, q: SpherePoint) -> float:
    """log|z_p - z_q|^2 from canonical chart data; no overflow near infinity."""
    with np.errstate(divide="ignore"):
        if p.chart == 0 and q.chart == 0:
            return float(2.0 * np.log(abs(p.coord - q.coord)))
        if p.chart == 1 and q.chart == 1:
            # |1/wp - 1/wq|^2 = |wp - wq|^2 / (|wp|^2 |wq|^2)
            if abs(p.coord - q.coord) == 0.0:
                return -math.inf
            return float(2.0 * (np.log(abs(p.coord - q.coord))
                                - np.log(abs(p.coord)) - np.log(abs(q.coord))))
        z = p.coord if p.chart == 0 else q.coord
        w = q.coord if p.chart == 0 else p.coord
        # |z - 1/w|^2 = |z w - 1|^2 / |w|^2
        return float(2.0 * (np.log(abs(z * w - 1.0)) - np.log(abs(w))))


def vandermonde_log_sq(coords) -> float:
    """sum_{i<j} log|z_i - z_j|^2 in chart 0; -inf at collisions.

    Accepts raw chart-0 coordinates or a Configuration.  Configuration pairs
    are rewritten through the chart transition (|z - 1/w|^2 = |zw - 1|^2/|w|^2
    and its two-chart analogue), so points arbitrarily close to infinity
    neither overflow nor lose their pairwise distances; a point exactly at
    infinity gives +inf unless another point collides with it there.
    """
    if isinstance(coords, Configuration):
        pts = [p.canonical() for p in coords.points]
        return float(sum(
            _pair_log_dist_sq(pts[i], pts[j])
            for i in range(len(pts)) for j in range(i)
        ))
    z = np.asarray(coords, dtype=complex).ravel()
    if len(z) < 2:
        return 0.0
    iu, ju = np.triu_indices(len(z), 1)
    with np.errstate(divide="ignore"):
        return float(np.sum(2.0 * np.log(np.abs(z[iu] - z[ju]))))


def pair_log_chordal(xyz: np.ndarray) -> np.ndarray:
    """sum over pairs of log ch^2 for (..., N, 3) configurations."""
    xyz = np.asarray(xyz, dtype=float)
    n = xyz.shape[-2]
    iu, ju = np.triu_indices(n, 1)
    s = chordal_sq(xyz[..., iu, :], xyz[..., ju, :])
    with np.errstate(divide="ignore"):
        return np.sum(np.log(s), axis=-1)


def _as_batch_xyz(config) -> np.ndarray:
    if isinstance(config, Configuration):
        return config.xyz
    return np.asarray(config, dtype=float)


def slater_log_norm(config, model: ModelSpec, basis: SectionBasis | None = None):
    """log |det S|^2 for (..., N, 3) configurations, via the product identity."""
    xyz = _as_batch_xyz(config)
    n = xyz.shape[-2]
    if n != model.n_points:
        raise EnergyError(f"configuration has {n} points, model wants {model.n_points}")
    out = pair_log_chordal(xyz)
    if model.perturbation is not None:
        out = out - model.k * np.sum(model.bundle.u_values(xyz), axis=-1)
    if basis is not None:
        out = out + basis.log_shift
    return out


def energy_per_particle(config, model: ModelSpec, basis: SectionBasis | None = None):
    """E = -log|det S|^2 / (k N); +inf when two points collide."""
    return -slater_log_norm(config, model, basis) / (model.k * model.n_points)


@dataclass(frozen=True)
class LogDensityValue:
    """Unnormalized Gibbs log density split into its physical parts.

    total = pairwise + weight + base whenever all three are finite; a
    coincident pair drives pairwise to -inf, a point on the divisor support
    drives base to +inf (integrable pole).
    """

    pairwise: float   # (beta/k) * (pair interaction + basis shift)
    weight: float     # -beta * sum of metric perturbations
    base: float       # sum of per-point log base densities (chart Lebesgue)
    total: float


def _log_fs_chart(xyz: np.ndarray) -> np.ndarray:
    """log density of the uniform measure vs canonical-chart Lebesgue."""
    return 2.0 * np.log1p(np.abs(xyz[..., 2])) - _LOG_PI - 2.0 * _LOG_2


def gibbs_log_density(config, model: ModelSpec, beta: float | None = None,
                      basis: SectionBasis | None = None):
    """log of the unnormalized Gibbs density  e^{-beta N E} prod dV.

    beta defaults to the model's.  The base factor is quoted against Lebesgue
    measure in each point's canonical chart, so a single round-measure point
    at the origin contributes log(1/pi).  A single configuration returns a
    LogDensityValue; batched input (..., N, 3) returns an array of totals.
    """
    if beta is None:
        beta = model.beta
    xyz = _as_batch_xyz(config)
    single = xyz.ndim == 2
    n = xyz.shape[-2]
    if n != model.n_points:
        raise EnergyError(f"configuration has {n} points, model wants {model.n_points}")
    if beta == 0.0:
        # the determinant term drops identically, even at coincidences
        pair = np.zeros(xyz.shape[:-2])
        wgt = np.zeros(xyz.shape[:-2])
    else:
        pair = (beta / model.k) * pair_log_chordal(xyz)
        if basis is not None:
            pair = pair + (beta / model.k) * basis.log_shift
        if model.perturbation is not None:
            wgt = -beta * np.sum(model.bundle.u_values(xyz), axis=-1)
        else:
            wgt = np.zeros(xyz.shape[:-2])
    base = np.sum(model.base.log_density_sphere(xyz) + _log_fs_chart(xyz), axis=-1)
    if single:
        return LogDensityValue(
            float(pair), float(wgt), float(base), float(pair + wgt + base)
        )
    return pair + wgt + base


# ------------------------------------------------------------------ gram ----

def fs_gram_diagonal(section_degree: int) -> np.ndarray:
    """Monomial Gram diagonal for the round metric: j!(n-j)!/(n+1)!.

    This is the beta-function integral int_0^1 s^j (1-s)^{n-j} ds of the
    substitution s = |z|^2/(1+|z|^2), under which the uniform measure on the
    sphere pushes forward to Lebesgue on [0,1].
    """
    n = section_degree
    j = np.arange(n + 1)
    return np.exp(_lgamma(j + 1) + _lgamma(n - j + 1) - _lgamma(n + 2))


def _lgamma(x):
    return np.vectorize(math.lgamma)(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class GramResult:
    """Hermitian Gram matrix of the section basis and its log determinant."""

    matrix: np.ndarray
    log_det: float


def _monomial_log_factors(grid: SphereGrid, section_degree: int):
    """Per-cell log magnitude pieces and phase of z^a (1+|z|^2)^{-n/2}.

    Returns (loghalf, phase) with loghalf[a] = a log|z| - (n/2) log(1+|z|^2)
    evaluated stably from the embedding (no overflow near either pole).
    """
    n = section_degree
    x3 = grid.centers_xyz[:, 2]
    # log|z| = (log(1-x3) - log(1+x3))/2,  log(1+|z|^2) = log 2 - log(1+x3)
    log_abs_z = 0.5 * (np.log1p(-x3) - np.log1p(x3))
    log_w = _LOG_2 - np.log1p(x3)
    phase = np.arctan2(grid.centers_xyz[:, 1], grid.centers_xyz[:, 0])
    a = np.arange(n + 1)
    loghalf = a[:, None] * log_abs_z[None, :] - 0.5 * n * log_w[None, :]
    return loghalf, phase


def gram_matrix(model: ModelSpec, u=None, grid: SphereGrid | None = None,
                check: bool = True, basis: SectionBasis | None = None) -> GramResult:
    """Gram matrix of the sections in the model metric against its base
    measure:  A_ab = int z^a conj(z)^b (1+|z|^2)^{-n} e^{-k(u_model + u)} dV.

    u is an optional further deformation (callable on (..., 3) unit vectors)
    on top of the model's own perturbation.  The undeformed round model has
    the exact diagonal answer and skips quadrature unless a grid is forced.
    Otherwise: cell sums on the equal-area grid; the azimuthal factor
    e^{i(a-b)phi} is integrated exactly by the uniform longitude columns
    whenever nphi exceeds the largest mode, so axisymmetric models come out
    exactly diagonal.  With check=True a refined grid must reproduce the
    matrix to 5e-3 of the diagonal scale.
    """
    n = model.section_degree
    if (grid is None and u is None and model.perturbation is None
            and model.divisor is None):
        A = np.diag(fs_gram_diagonal(n)).astype(complex)
        log_det = float(np.sum(np.log(fs_gram_diagonal(n))))
    else:
        if grid is None:
            nphi = max(192, 2 * n + 2)
            grid = SphereGrid(max(96, nphi // 2, 3 * n), nphi)
        if grid.nphi <= n:
            raise EnergyError(f"grid nphi={grid.nphi} aliases sections of degree {n}")
        A = _gram_on_grid(model, grid, u)
        if check:
            fine = SphereGrid(int(grid.nu * 3 / 2), int(grid.nphi * 3 / 2))
            A2 = _gram_on_grid(model, fine, u)
            scale = np.abs(np.diag(A)).max()
            if np.abs(A2 - A).max() > 5e-3 * scale:
                raise EnergyError(
                    f"gram quadrature not converged: max change {np.abs(A2 - A).max():.3e}"
                )
            A = A2
        sign, log_det = np.linalg.slogdet(A)
        log_det = float(log_det)
    if basis is not None:
        B = np.asarray(basis.matrix, dtype=complex)
        A = B @ A @ B.conj().T
        A = 0.5 * (A + A.conj().T)
        log_det += basis.log_shift
    return GramResult(A, log_det)


def _gram_on_grid(model: ModelSpec, grid: SphereGrid, u=None) -> np.ndarray:
    n = model.section_degree
    masses = model.base.cell_masses(grid)
    with np.errstate(divide="ignore"):
        logm = np.log(masses)
    if model.perturbation is not None:
        logm = logm - model.k * model.bundle.u_values(grid.centers_xyz)
    if u is not None:
        logm = logm - model.k * np.asarray(u(grid.centers_xyz), dtype=float)
    loghalf, phase = _monomial_log_factors(grid, n)
    # cell c contributes exp(loghalf[a] + loghalf[b] + logm) e^{i(a-b)phase};
    # splitting logm evenly gives A = Z Z* with one factor per monomial
    Z = np.exp(loghalf + 0.5 * logm[None, :]).astype(complex)
    Z *= np.exp(1j * np.arange(n + 1)[:, None] * phase[None, :])
    A = Z @ Z.conj().T
    return 0.5 * (A + A.conj().T)


def orthonormalize_basis(model: ModelSpec, gram=None,
                         grid: SphereGrid | None = None) -> SectionBasis:
    """Basis in which the model Gram matrix is the identity.

    Cholesky gram = L L*; the basis matrix is inv(L), lower triangular, and
    the log norm shift is -log det(gram).
    """
    if gram is None:
        gram = gram_matrix(model, grid=grid)
    A = gram.matrix if isinstance(gram, GramResult) else np.asarray(gram)
    try:
        L = cholesky(A, lower=True)
    except np.linalg.LinAlgError as e:
        raise EnergyError(f"gram matrix is not positive definite: {e}") from e
    T = solve_triangular(L, np.eye(L.shape[0], dtype=complex), lower=True)
    log_shift = -2.0 * float(np.sum(np.log(np.abs(np.diag(L)))))
    return SectionBasis(T, log_shift)
