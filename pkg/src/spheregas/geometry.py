"""Riemann-sphere geometry: charts, grid, Green function, divisors, measures.

Conventions, fixed once for the whole package:

* Two affine charts.  Chart 0 has coordinate z, chart 1 has coordinate
  w = 1/z.  A point is in canonical form when |coord| <= 1 in its active
  chart; ties (|coord| = 1) go to chart 0.
* Embedding into R^3: the point with chart-0 coordinate z sits at
  x = (2 Re z, 2 Im z, 1 - |z|^2) / (1 + |z|^2), so z = (x1 + i x2)/(1 + x3).
  Chart 1 covers the south pole: w = (x1 - i x2)/(1 - x3).
* The complex Hessian operator is normalized so that applied to log|z|^2 it
  produces a unit point mass at z = 0.  Consequently log(1 + |z|^2) produces
  the normalized Fubini-Study area measure: total mass 1, density
  (1/pi)(1 + |z|^2)^{-2} against chart Lebesgue measure.  In the coordinates
  (u, phi) with u = x3 and phi the longitude, that measure is du dphi/(4 pi),
  and the operator acts on a function f as
      (1/4 pi) [ d/du((1 - u^2) df/du) + (1 - u^2)^{-1} d^2f/dphi^2 ] du dphi.
* Squared chordal distance, normalized to [0, 1]:
      ch^2(x, y) = |z - w|^2 / ((1 + |z|^2)(1 + |w|^2)) = |x - y|^2_{R^3} / 4.
  All pair quantities are computed through the R^3 form, which is chart-free
  and cannot overflow.
* The Green function of the normalized Fubini-Study measure is
      G(x, y) = -log ch^2(x, y) + C,
  with C fixed by the normalization  int G(., y) dFS = 0.  C is computed by
  quadrature at import time (it is not hard-coded) and cached.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, sparse
from scipy.linalg import solve_banded

__all__ = [
    "SpherePoint",
    "point_from_xyz",
    "xyz_from_chart",
    "chart_transition",
    "canonicalize",
    "antipode",
    "chordal_sq",
    "geodesic_distance",
    "fs_density",
    "green_constant",
    "green_function",
    "rotation_matrix",
    "rotation_taking",
    "SphereGrid",
    "grid_build",
    "DensityGrid",
    "WeightedDivisor",
    "BundleMetric",
    "BaseMeasure",
    "uniform_sphere",
    "GeometryError",
]


class GeometryError(ValueError):
    """Invalid geometric data (bad chart, weight out of range, ...)."""


# ---------------------------------------------------------------- points ----

@dataclass(frozen=True)
class SpherePoint:
    """A point of the sphere given by an affine chart index and a coordinate.

    chart 0 carries the coordinate z (origin = north pole of the embedding),
    chart 1 carries w = 1/z (origin = south pole).  coord must be finite;
    the poles are represented by coord 0 in the respective chart.
    """

    chart: int
    coord: complex

    def __post_init__(self):
        if self.chart not in (0, 1):
            raise GeometryError(f"chart must be 0 or 1, got {self.chart}")
        c = complex(self.coord)
        if not (math.isfinite(c.real) and math.isfinite(c.imag)):
            raise GeometryError(f"coordinate must be finite, got {c}")

    @property
    def xyz(self) -> np.ndarray:
        return xyz_from_chart(self.chart, self.coord)

    def canonical(self) -> "SpherePoint":
        return canonicalize(self)


def xyz_from_chart(chart: int, coord: complex) -> np.ndarray:
    """Unit vector in R^3 for a chart coordinate."""
    c = complex(coord)
    d = 1.0 + abs(c) ** 2
    x1 = 2.0 * c.real / d
    x2 = 2.0 * c.imag / d
    x3 = (1.0 - abs(c) ** 2) / d
    if chart == 0:
        return np.array([x1, x2, x3])
    # chart 1: w = (x1 - i x2)/(1 - x3); inverting gives the reflected formula
    return np.array([x1, -x2, -x3])


def point_from_xyz(x) -> SpherePoint:
    """Canonical-form SpherePoint for a unit vector (normalized defensively)."""
    x = np.asarray(x, dtype=float)
    n = float(np.linalg.norm(x))
    if not math.isfinite(n) or n == 0.0:
        raise GeometryError("cannot project zero or non-finite vector to the sphere")
    x = x / n
    if x[2] >= 0.0:
        # |z|^2 = (1 - x3)/(1 + x3) <= 1 here; ties at the equator keep chart 0
        return SpherePoint(0, complex(x[0], x[1]) / (1.0 + x[2]))
    return SpherePoint(1, complex(x[0], -x[1]) / (1.0 - x[2]))


def chart_transition(p: SpherePoint) -> SpherePoint:
    """Representation of the same point in the other chart (coord -> 1/coord).

    The transition is undefined at the chart origin (its image coordinate is
    not finite); by convention the point is returned unchanged there, matching
    canonicalization which keeps the poles in their covering chart.
    """
    if p.coord == 0:
        return p
    return SpherePoint(1 - p.chart, 1.0 / complex(p.coord))


def canonicalize(p: SpherePoint) -> SpherePoint:
    """Canonical form: |coord| <= 1, ties broken toward chart 0."""
    r = abs(complex(p.coord))
    if r > 1.0:
        return chart_transition(p)
    if r == 1.0 and p.chart == 1:
        return chart_transition(p)
    return p


def antipode(p: SpherePoint) -> SpherePoint:
    return point_from_xyz(-p.xyz)


def _as_xyz(p) -> np.ndarray:
    if isinstance(p, SpherePoint):
        return p.xyz
    return np.asarray(p, dtype=float)


def chordal_sq(p, q):
    """Squared chordal distance in [0, 1]: |x - y|^2 / 4 on unit vectors.

    Accepts SpherePoints or R^3 arrays (broadcasting over leading axes).
    Computed from the difference vector, which keeps full relative precision
    for nearby points (no cancellation in 1 - x.y).
    """
    x, y = _as_xyz(p), _as_xyz(q)
    d = x - y
    return 0.25 * np.sum(d * d, axis=-1)


def geodesic_distance(p, q):
    """Great-circle distance on the unit sphere, in [0, pi]."""
    s = np.clip(chordal_sq(p, q), 0.0, 1.0)
    return 2.0 * np.arcsin(np.sqrt(s))


def fs_density(p: SpherePoint) -> float:
    """Normalized Fubini-Study density against chart Lebesgue measure.

    Evaluated in the canonical chart so the value is well defined:
    (1/pi)(1 + |coord|^2)^{-2}, between 1/(4 pi) and 1/pi.
    """
    c = canonicalize(p)
    return 1.0 / (math.pi * (1.0 + abs(complex(c.coord)) ** 2) ** 2)


# ------------------------------------------------------- green function ----

@lru_cache(maxsize=1)
def green_constant() -> float:
    """Additive constant C with  int (-log ch^2(., y) + C) dFS = 0.

    By rotation invariance the integral is evaluated with y at the north
    pole; ch^2 = (1 - u)/2 and the FS measure is du/2 on u in [-1, 1].
    The integrable log singularity sits at u = 1.
    """
    val, err = integrate.quad(
        lambda u: -math.log((1.0 - u) / 2.0) * 0.5, -1.0, 1.0, points=[1.0]
    )
    if err > 1e-9:
        raise GeometryError(f"green normalization quadrature error {err:.2e}")
    return -val


def green_function(p, q):
    """Green function G(x, y) = -log ch^2(x, y) + C of the normalized FS area.

    Symmetric; +inf at coincident points; the constant makes all FS averages
    vanish.  Accepts SpherePoints or R^3 arrays (broadcasts).
    """
    s = chordal_sq(p, q)
    with np.errstate(divide="ignore"):
        return -np.log(s) + green_constant()


# ----------------------------------------------------------- rotations ----

def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotation_taking(p, q) -> np.ndarray:
    """A rotation matrix sending point p to point q (minimal-angle choice)."""
    x, y = _as_xyz(p), _as_xyz(q)
    c = float(np.dot(x, y))
    axis = np.cross(x, y)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        if c > 0:
            return np.eye(3)
        # antipodal: rotate by pi about any orthogonal axis
        helper = np.array([1.0, 0.0, 0.0])
        if abs(np.dot(helper, x)) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(x, helper)
        return rotation_matrix(axis, math.pi)
    return rotation_matrix(axis, math.atan2(n, c))


def uniform_sphere(rng: np.random.Generator, size: int) -> np.ndarray:
    """iid points from the normalized FS area measure, as (size, 3) vectors."""
    u = rng.uniform(-1.0, 1.0, size)
    phi = rng.uniform(0.0, 2.0 * math.pi, size)
    r = np.sqrt(1.0 - u * u)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), u])


# ---------------------------------------------------------------- grid ----

class SphereGrid:
    """Equal-area grid: nu iso-latitude bands x nphi uniform longitude cells.

    Every cell is a (u, phi) rectangle with u = x3; since the FS measure is
    du dphi/(4 pi), all nu*nphi cells have exactly equal mass 1/(nu*nphi).
    Rings are indexed from the north (u = +1) down; the flat cell index is
    ring * nphi + column.  Longitude columns are aligned across rings.
    """

    def __init__(self, nu: int, nphi: int):
        if nu < 2 or nphi < 4:
            raise GeometryError(f"grid too small: nu={nu}, nphi={nphi} (need nu>=2, nphi>=4)")
        self.nu = int(nu)
        self.nphi = int(nphi)
        self.n = self.nu * self.nphi
        self.du = 2.0 / self.nu
        self.dphi = 2.0 * math.pi / self.nphi
        # ring i spans u in [1 - (i+1) du, 1 - i du]
        self.u_edges = 1.0 - self.du * np.arange(self.nu + 1)
        self.u_centers = 1.0 - self.du * (np.arange(self.nu) + 0.5)
        self.phi_centers = self.dphi * (np.arange(self.nphi) + 0.5)
        uc = np.repeat(self.u_centers, self.nphi)
        pc = np.tile(self.phi_centers, self.nu)
        r = np.sqrt(np.clip(1.0 - uc * uc, 0.0, None))
        self.centers_xyz = np.column_stack([r * np.cos(pc), r * np.sin(pc), uc])
        self.cell_mass = 1.0 / self.n  # exact, by construction

    # -- indexing ---------------------------------------------------------

    def ring_of(self, flat):
        return np.asarray(flat) // self.nphi

    def bin_points(self, xyz: np.ndarray) -> np.ndarray:
        """Flat cell indices for an (..., 3) array of unit vectors."""
        xyz = np.asarray(xyz, dtype=float)
        u = np.clip(xyz[..., 2], -1.0, 1.0)
        i = np.clip(((1.0 - u) / self.du).astype(int), 0, self.nu - 1)
        phi = np.arctan2(xyz[..., 1], xyz[..., 0]) % (2.0 * math.pi)
        j = np.clip((phi / self.dphi).astype(int), 0, self.nphi - 1)
        return i * self.nphi + j

    def refined(self, factor: int = 2) -> "SphereGrid":
        """Grid with the linear scale divided by `factor` (cells x factor^2)."""
        return SphereGrid(self.nu * factor, self.nphi * factor)

    def center_points(self):
        return [point_from_xyz(x) for x in self.centers_xyz]

    # -- discrete complex Hessian ----------------------------------------

    def ddc_matrix(self) -> sparse.csr_matrix:
        """Sparse symmetric operator: cell masses of the curvature of phi.

        Finite-volume flux form of
            (1/4 pi)[ d/du((1-u^2) d/du) + (1-u^2)^{-1} d^2/dphi^2 ]
        on the (u, phi) product cells.  The (1-u^2) edge factor vanishes at
        the poles, so no boundary condition is needed and the row sums are
        exactly zero (total curvature of a global function vanishes).
        The azimuthal flux integral of (1-u^2)^{-1} over a band diverges in
        the polar bands; weighting it by the leading smooth azimuthal profile
        sqrt(1-u^2) gives the finite coefficient used here,
            beta_i = (Delta arcsin(u) / dphi) / sqrt(1 - u_c^2) / (4 pi),
        which matches the band-center value to O(h^2) in the interior and
        keeps point-source solutions accurate through the polar caps.
        """
        if getattr(self, "_ddc", None) is not None:
            return self._ddc
        nu, nphi, du, dphi = self.nu, self.nphi, self.du, self.dphi
        n = self.n
        a_edge = 1.0 - self.u_edges**2          # (nu+1,), zero at both poles
        alpha = (dphi / du) * a_edge / (4.0 * math.pi)
        beta = self._beta_coeffs()

        rows, cols, vals = [], [], []
        idx = np.arange(n).reshape(nu, nphi)
        # meridional couplings between ring i and ring i+1 share edge i+1
        for i in range(nu - 1):
            w = alpha[i + 1]
            rows.extend(idx[i]);     cols.extend(idx[i + 1]); vals.extend([w] * nphi)
            rows.extend(idx[i + 1]); cols.extend(idx[i]);     vals.extend([w] * nphi)
        # azimuthal couplings within each ring (periodic)
        for i in range(nu):
            w = beta[i]
            jn = np.roll(idx[i], -1)
            rows.extend(idx[i]); cols.extend(jn);     vals.extend([w] * nphi)
            rows.extend(jn);     cols.extend(idx[i]); vals.extend([w] * nphi)
        L = sparse.csr_matrix(
            (np.array(vals), (np.array(rows), np.array(cols))), shape=(n, n)
        )
        diag = np.asarray(L.sum(axis=1)).ravel()
        L = L - sparse.diags(diag)
        self._ddc = L.tocsr()
        return self._ddc

    _ddc = None

    def _beta_coeffs(self) -> np.ndarray:
        """Azimuthal coupling per band (see ddc_matrix)."""
        dth = np.arcsin(self.u_edges[:-1]) - np.arcsin(self.u_edges[1:])
        return (dth / self.dphi) / np.sqrt(1.0 - self.u_centers**2) / (4.0 * math.pi)

    def ddc_apply(self, values: np.ndarray) -> np.ndarray:
        """Curvature cell masses of a potential sampled at cell centers."""
        return self.ddc_matrix() @ np.asarray(values, dtype=float)

    def poisson_solve(self, masses: np.ndarray) -> np.ndarray:
        """Solve ddc(phi) = masses for cell values phi, mean-zero gauge.

        masses must sum to ~0 (solvability on a closed surface); the residual
        mass is spread uniformly before solving.  FFT in longitude reduces the
        operator to one tridiagonal system per azimuthal mode.
        """
        rhs = np.asarray(masses, dtype=float).reshape(self.nu, self.nphi).copy()
        total = rhs.sum()
        if abs(total) > 1e-8:
            raise GeometryError(f"poisson data has net mass {total:.3e}; must vanish")
        rhs -= total / self.n

        a_edge = 1.0 - self.u_edges**2
        alpha = (self.dphi / self.du) * a_edge / (4.0 * math.pi)
        beta = self._beta_coeffs()

        R = np.fft.rfft(rhs, axis=1)           # (nu, nphi//2 + 1)
        nmodes = R.shape[1]
        lam = 2.0 - 2.0 * np.cos(2.0 * math.pi * np.arange(nmodes) / self.nphi)
        out = np.empty_like(R)
        lower = alpha[1:-1]                    # coupling between ring i and i+1
        for q in range(nmodes):
            diag = -(alpha[:-1] + alpha[1:]) - beta * lam[q]
            ab = np.zeros((3, self.nu), dtype=complex if q else float)
            ab[0, 1:] = lower
            ab[1, :] = diag
            ab[2, :-1] = lower
            if q == 0:
                # zonal block is singular (constants); pinning one entry is
                # exact because e0 is orthogonal to the range of the
                # symmetric block, so the pinned component solves to zero
                ab[1, 0] -= 1.0
                out[:, 0] = solve_banded((1, 1), ab, R[:, 0].real)
            else:
                out[:, q] = solve_banded((1, 1), ab, R[:, q])
        phi = np.fft.irfft(out, n=self.nphi, axis=1).ravel()
        phi -= phi.mean()                       # mean-zero against FS (equal cells)
        res = rhs.ravel() - self.ddc_apply(phi)
        if np.abs(res).max() > 1e-11 * max(1.0, np.abs(rhs).max()):
            phi += self._poisson_cg(res)
            phi -= phi.mean()
        return phi

    def _poisson_cg(self, rhs: np.ndarray) -> np.ndarray:
        from scipy.sparse.linalg import cg, LinearOperator

        L = self.ddc_matrix()
        op = LinearOperator((self.n, self.n), matvec=lambda v: L @ (v - v.mean()))
        sol, info = cg(op, rhs, rtol=1e-12, atol=1e-15, maxiter=400)
        if info != 0:
            raise GeometryError(f"poisson correction failed to converge (info={info})")
        return sol - sol.mean()


def grid_build(resolution: int) -> SphereGrid:
    """Equal-area grid with approximately `resolution` cells.

    The band/column counts are the tensor factorization closest to square
    cells at the equator (nphi ~ 2 nu); the actual cell count is nu*nphi and
    may differ slightly from the request when it does not factor.  resolution
    8 gives exactly 2 x 4 = 8 cells.
    """
    if resolution < 8:
        raise GeometryError(f"resolution {resolution} too small (need >= 8)")
    nu = max(2, round(math.sqrt(resolution / 2.0)))
    nphi = max(4, round(resolution / nu))
    return SphereGrid(nu, nphi)


# ------------------------------------------------------------- measures ----

@dataclass
class DensityGrid:
    """A measure on a SphereGrid given by nonnegative cell masses summing to 1."""

    grid: SphereGrid
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float).ravel()
        if m.shape != (self.grid.n,):
            raise GeometryError(f"masses shape {m.shape} != grid size {self.grid.n}")
        if np.any(m < -1e-15):
            raise GeometryError("masses must be nonnegative")
        s = m.sum()
        if abs(s - 1.0) > 1e-12:
            raise GeometryError(f"masses sum to {s!r}; must be 1 within 1e-12 (use normalized())")
        self.masses = np.clip(m, 0.0, None)

    @classmethod
    def normalized(cls, grid: SphereGrid, weights) -> "DensityGrid":
        w = np.clip(np.asarray(weights, dtype=float).ravel(), 0.0, None)
        s = w.sum()
        if not (s > 0.0) or not math.isfinite(s):
            raise GeometryError("cannot normalize: total weight is zero or non-finite")
        return cls(grid, w / s)

    @classmethod
    def uniform(cls, grid: SphereGrid) -> "DensityGrid":
        return cls(grid, np.full(grid.n, 1.0 / grid.n))

    def to_csv(self, path) -> None:
        """Columns: cell_index, center_chart, center_re, center_im, mass."""
        with open(path, "w") as f:
            f.write(f"# sphere-grid nu={self.grid.nu} nphi={self.grid.nphi}\n")
            f.write("cell_index,center_chart,center_re,center_im,mass\n")
            for c, x in enumerate(self.grid.centers_xyz):
                p = point_from_xyz(x)
                f.write(
                    f"{c},{p.chart},{p.coord.real:.17g},{p.coord.imag:.17g},"
                    f"{self.masses[c]:.17g}\n"
                )

    @classmethod
    def from_csv(cls, path) -> "DensityGrid":
        with open(path) as f:
            header = f.readline()
            if not header.startswith("# sphere-grid"):
                raise GeometryError("missing grid header line in density CSV")
            kv = dict(tok.split("=") for tok in header.split()[2:])
            grid = SphereGrid(int(kv["nu"]), int(kv["nphi"]))
            body = f.read()
        data = np.genfromtxt(io.StringIO(body), delimiter=",", names=True)
        masses = np.zeros(grid.n)
        masses[data["cell_index"].astype(int)] = data["mass"]
        return cls(grid, masses)


@dataclass(frozen=True)
class WeightedDivisor:
    """Marked points p_m with weights w_m in (0, 1) (the klt range).

    Points must be pairwise separated (chordal distance >= 1e-9).  The log
    Fano condition sum w_m < 2 is checked where the divisor is used as the
    data of a degree-(2 - sum w) model, not here.
    """

    points: tuple
    weights: tuple

    def __post_init__(self):
        pts = tuple(p if isinstance(p, SpherePoint) else point_from_xyz(p) for p in self.points)
        ws = tuple(float(w) for w in self.weights)
        if len(pts) != len(ws):
            raise GeometryError("points and weights must have equal length")
        for w in ws:
            if not (0.0 < w < 1.0):
                raise GeometryError(
                    f"weight {w} violates the klt range: each weight must lie strictly in (0, 1)"
                )
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                if math.sqrt(chordal_sq(pts[a], pts[b])) < 1e-9:
                    raise GeometryError(f"divisor points {a} and {b} are not separated")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", ws)

    def __len__(self):
        return len(self.points)

    @property
    def total_weight(self) -> float:
        return sum(self.weights)

    @property
    def points_xyz(self) -> np.ndarray:
        return np.array([p.xyz for p in self.points]).reshape(len(self.points), 3)


@dataclass(frozen=True)
class BundleMetric:
    """Metric data for the degree-m bundle: weight log(1+|z|^2) + u(x)/m.

    degree m > 0 is the total curvature mass.  The perturbation u is a
    callable on (..., 3) unit-vector arrays returning floats; None means the
    round (Fubini-Study) metric.  Positivity of the curvature m*FS + ddc(u)
    is a sampled check, not implied by construction: call check_positivity.
    """

    degree: float
    perturbation: object = None

    def __post_init__(self):
        if not (self.degree > 0.0) or not math.isfinite(self.degree):
            raise GeometryError(f"bundle degree must be positive, got {self.degree}")

    def u_values(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        if self.perturbation is None:
            return np.zeros(xyz.shape[:-1])
        return np.asarray(self.perturbation(xyz), dtype=float)

    def curvature_masses(self, grid: SphereGrid) -> np.ndarray:
        """Cell masses of omega_0 = m*FS + ddc(u); sums to m exactly."""
        base = np.full(grid.n, self.degree / grid.n)
        if self.perturbation is None:
            return base
        return base + grid.ddc_apply(self.u_values(grid.centers_xyz))

    def check_positivity(self, grid: SphereGrid) -> None:
        w = self.curvature_masses(grid)
        if w.min() <= 0.0:
            raise GeometryError(
                f"metric curvature is not positive: min cell mass {w.min():.3e} on {grid.n} cells"
            )


def _bump(r):
    """C-infinity radial cutoff: 1 for r <= 0.2, 0 for r >= 0.85."""
    r = np.asarray(r, dtype=float)
    t = np.clip((0.85 - r) / (0.85 - 0.2), 0.0, 1.0)
    a = np.zeros_like(t)
    b = np.zeros_like(t)
    np.exp(np.divide(-1.0, t, out=np.full_like(t, -np.inf), where=t > 0), out=a)
    np.exp(np.divide(-1.0, 1.0 - t, out=np.full_like(t, -np.inf), where=t < 1), out=b)
    return a / (a + b)


def _qform_unit_square(w: float, lam: float) -> float:
    """int over [0,1]^2 of (x^2 + lam y^2)^(-w), 0 < w < 1, lam > 0.

    Polar coordinates absorb the corner singularity exactly; the angular
    integrand is smooth on each side of the diagonal, where the boundary
    radius switches between sec and csc.
    """
    xg, wg = np.polynomial.legendre.leggauss(24)
    out = 0.0
    for a, b in ((0.0, math.pi / 4), (math.pi / 4, math.pi / 2)):
        th = 0.5 * (b - a) * (xg + 1.0) + a
        ww = 0.5 * (b - a) * wg
        rmax = np.minimum(1.0 / np.cos(th), 1.0 / np.sin(th))
        f = (np.cos(th) ** 2 + lam * np.sin(th) ** 2) ** (-w) * rmax ** (2 - 2 * w)
        out += float(ww @ f)
    return out / (2.0 - 2.0 * w)


def _chordal_sq_offset(up, du_, dphi):
    """Chordal square between (u, phi) = (up + du_, phi_p + dphi) and the
    point at (up, phi_p), accurate for offsets down to the underflow limit.

    Uses 1 - x.p = du^2/(A + B) + R R_p (1 - cos dphi) with A = R_p^2 - up du
    and B = R R_p, an exact rearrangement whose terms are all nonnegative for
    offsets that stay on the sphere, so no cancellation occurs.
    """
    rp2 = (1.0 - up) * (1.0 + up)
    r2 = np.clip(rp2 - du_ * (2.0 * up + du_), 0.0, None)
    b = np.sqrt(rp2 * r2)
    denom = (rp2 - up * du_) + b
    lin = np.divide(du_ * du_, denom, out=np.zeros_like(b), where=denom > 0)
    return 0.5 * (lin + 2.0 * b * np.sin(0.5 * dphi) ** 2)


class BaseMeasure:
    """Reference volume measure dV, total mass 1.

    kinds:
      'fubini-study'  the normalized FS area itself
      'log-fano'      c * prod_m ch^2(x, p_m)^{-w_m} * FS for a WeightedDivisor
                      (the poles are integrable because each w_m < 1)
      'custom'        user density relative to FS, normalized here

    The log-density is available relative to the FS measure (chart-free; used
    by samplers and entropies) and relative to chart Lebesgue measure in the
    canonical chart (adds log fs_density; the form quoted by log-density
    reports).
    """

    def __init__(self, kind: str = "fubini-study", divisor: WeightedDivisor | None = None,
                 density=None):
        if kind not in ("fubini-study", "log-fano", "custom"):
            raise GeometryError(f"unknown base measure kind {kind!r}")
        self.kind = kind
        self.divisor = divisor
        self._density = density
        if kind == "log-fano":
            if divisor is None or len(divisor) == 0:
                raise GeometryError("log-fano base measure needs a nonempty divisor")
            if divisor.total_weight >= 2.0:
                raise GeometryError(
                    f"divisor weight sum {divisor.total_weight} >= 2 leaves no positive degree"
                )
            self._log_norm = self._compute_log_norm()
        elif kind == "custom":
            if density is None:
                raise GeometryError("custom base measure needs a density callable")
            self._log_norm = self._compute_log_norm()
        else:
            self._log_norm = 0.0

    # unnormalized log density relative to FS
    def _log_raw(self, xyz: np.ndarray, exclude: int | None = None) -> np.ndarray:
        """Optionally skip divisor factor `exclude` (supplied externally when a
        quadrature carries that singular factor in exact local coordinates)."""
        xyz = np.asarray(xyz, dtype=float)
        if self.kind == "fubini-study":
            return np.zeros(xyz.shape[:-1])
        if self.kind == "log-fano":
            out = np.zeros(xyz.shape[:-1])
            for m, (p, w) in enumerate(zip(self.divisor.points_xyz, self.divisor.weights)):
                if m == exclude:
                    continue
                s = chordal_sq(xyz, p)
                with np.errstate(divide="ignore"):
                    out = out - w * np.log(s)
            return out
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self._density(xyz), dtype=float))

    # -- normalization -------------------------------------------------------

    def _cap_s_radii(self) -> np.ndarray:
        """Chordal-square radii of disjoint caps around the divisor points."""
        pts = self.divisor.points_xyz
        theta = np.full(len(pts), math.pi / 4)
        for i in range(len(pts)):
            for j in range(i):
                d = geodesic_distance(pts[i], pts[j])
                theta[i] = min(theta[i], 0.45 * d)
                theta[j] = min(theta[j], 0.45 * d)
        return np.sin(theta / 2.0) ** 2

    def _cap_integral(self, m: int, s_cap: float) -> float:
        """int over the cap around pole m of bump * exp(_log_raw) dFS.

        Exact polar coordinates about the pole turn the FS area into
        ds dpsi / 2 pi, so the singular factor is s^{-w} in the radial
        integration variable itself and never suffers cancellation.  Dyadic
        shells with Gauss nodes resolve it; below the last shell the smooth
        remainder is constant to machine precision and the tail is analytic.
        """
        p = self.divisor.points_xyz[m]
        w = self.divisor.weights[m]
        frame = rotation_taking(np.array([0.0, 0.0, 1.0]), p)
        e1, e2 = frame[:, 0], frame[:, 1]
        npsi = 128
        psi = np.arange(npsi) * (2.0 * math.pi / npsi)
        ring = np.outer(np.cos(psi), e1) + np.outer(np.sin(psi), e2)   # (npsi, 3)
        xg, wg = np.polynomial.legendre.leggauss(16)
        tt = 0.5 * (xg + 1.0)
        wt = 0.5 * wg
        total = 0.0
        nshell = 48
        for k in range(nshell):
            shi = s_cap * 2.0 ** (-k)
            slo = 0.5 * shi
            s = slo + (shi - slo) * tt
            th = 2.0 * np.arcsin(np.sqrt(s))
            x = np.cos(th)[:, None, None] * p + np.sin(th)[:, None, None] * ring[None, :, :]
            f = np.exp(self._log_raw(x, exclude=m))          # (16, npsi)
            radial = wt * (shi - slo) * s ** (-w) * _bump(s / s_cap)
            total += float(radial @ f.mean(axis=1))
        s_tail = s_cap * 2.0 ** (-nshell)
        g0 = float(np.exp(self._log_raw(p, exclude=m)))
        return total + g0 * s_tail ** (1.0 - w) / (1.0 - w)

    def _compute_log_norm(self) -> float:
        """log of int exp(_log_raw) dFS.

        Divisor poles are integrated on disjoint caps in exact polar
        coordinates (spectrally accurate for every weight < 1); the smooth
        remainder, cut off by a partition of unity, uses midpoint sums on two
        grids with a Richardson step and a convergence check.
        """
        if self.kind == "custom":
            t1 = self._midpoint_total(SphereGrid(96, 192))
            t2 = self._midpoint_total(SphereGrid(144, 288))
            if not (math.isfinite(t1) and math.isfinite(t2)) or abs(t2 - t1) > 5e-3 * abs(t2):
                raise GeometryError(
                    f"base measure normalization not converged: {t1:.6g} vs {t2:.6g}"
                )
            return math.log(t2 + (t2 - t1) / ((144 / 96) ** 2 - 1.0))

        s_caps = self._cap_s_radii()
        caps = sum(self._cap_integral(m, s_caps[m]) for m in range(len(s_caps)))
        t1 = self._remainder_total(SphereGrid(160, 320), s_caps)
        t2 = self._remainder_total(SphereGrid(240, 480), s_caps)
        if not (math.isfinite(t1) and math.isfinite(t2)):
            raise GeometryError("base measure does not normalize (non-finite integral)")
        rem = t2 + (t2 - t1) / ((240 / 160) ** 2 - 1.0)
        if abs(t2 - t1) > 2e-3 * (caps + rem):
            raise GeometryError(
                f"base measure normalization not converged: {t1:.6g} vs {t2:.6g}"
            )
        return math.log(caps + rem)

    def _midpoint_total(self, grid: SphereGrid) -> float:
        return float(np.exp(self._log_raw(grid.centers_xyz)).sum() * grid.cell_mass)

    def _remainder_total(self, grid: SphereGrid, s_caps: np.ndarray) -> float:
        """Midpoint sum of (1 - sum of bumps) * exp(_log_raw) over the grid."""
        x = grid.centers_xyz
        chi = np.zeros(grid.n)
        for p, sc in zip(self.divisor.points_xyz, s_caps):
            chi += _bump(chordal_sq(x, p) / sc)
        wgt = np.clip(1.0 - chi, 0.0, 1.0)
        live = wgt > 0.0
        vals = np.zeros(grid.n)
        vals[live] = np.exp(self._log_raw(x[live])) * wgt[live]
        return float(vals.sum() * grid.cell_mass)

    # -- cell integration --------------------------------------------------

    def _raw_cell_integrals(self, grid: SphereGrid) -> np.ndarray:
        """int_cell exp(_log_raw) dFS per cell, pole-aware."""
        vals = np.exp(self._log_raw(grid.centers_xyz)) * grid.cell_mass
        if self.kind == "fubini-study":
            return vals
        if self.kind == "log-fano":
            for m in range(len(self.divisor)):
                self._fix_cells_near_pole(grid, vals, m)
        return vals

    def _fix_cells_near_pole(self, grid: SphereGrid, vals: np.ndarray, m: int) -> None:
        """Replace midpoint masses near one pole by graded product quadrature.

        The window radius ~12 cell scales keeps the leftover midpoint error of
        the r^{-2w} tail O(12^{-2w} h^{2-2w}), small even for w close to 1.
        """
        pole_xyz = self.divisor.points_xyz[m]
        d2 = chordal_sq(grid.centers_xyz, pole_xyz)
        h2 = grid.du**2 + (grid.dphi * np.sqrt(np.clip(1 - grid.centers_xyz[:, 2]**2, 0, 1)))**2
        near = np.nonzero(d2 < 150.0 * h2)[0]
        for c in near:
            i, j = divmod(int(c), grid.nphi)
            u0, u1 = grid.u_edges[i + 1], grid.u_edges[i]
            p0, p1 = j * grid.dphi, (j + 1) * grid.dphi
            vals[c] = self._rect_integral(u0, u1, p0, p1, m)

    def _rect_integral(self, u0, u1, p0, p1, m: int, order: int = 12) -> float:
        """exp(_log_raw) integrated over a (u, phi) rectangle near pole m.

        A rectangle whose closure contains the pole is split there into up to
        four corner rectangles whose singular corner is the pole itself; node
        offsets from that corner feed a cancellation-free chordal formula, so
        the s^{-w} factor stays exact arbitrarily close to the pole (including
        a pole sitting exactly on a grid edge or at u = +-1).  Rectangles near
        but not containing the pole use a plain graded rule toward the nearest
        corner.  Both rules cluster nodes by the map t -> t^g.
        """
        pole_xyz = self.divisor.points_xyz[m]
        w = self.divisor.weights[m]
        up = float(pole_xyz[2])
        rp2 = (1.0 - up) * (1.0 + up)
        # at u = +-1 the azimuth degenerates and every cell of the boundary
        # ring touches the pole along its collapsed edge
        polar = abs(up) >= 1.0 - 1e-15
        if polar:
            phip = p0
        else:
            phip = math.atan2(pole_xyz[1], pole_xyz[0]) % (2 * math.pi)
            # pick the 2 pi shift of the pole longitude nearest the window center
            pc = 0.5 * (p0 + p1)
            phip += 2 * math.pi * round((pc - phip) / (2 * math.pi))
        xg, wg = np.polynomial.legendre.leggauss(order)
        t = 0.5 * (xg + 1.0)
        wt = 0.5 * wg

        def eval_offsets(DU, DP):
            s = _chordal_sq_offset(up, DU, DP)
            U = np.clip(up + DU, -1.0, 1.0)
            R = np.sqrt(np.clip(1 - U * U, 0, None))
            P = phip + DP
            X = np.stack([R * np.cos(P), R * np.sin(P), U], axis=-1)
            return np.exp(self._log_raw(X, exclude=m) - w * np.log(s))

        def corner_polar(ub, pb):
            # s = |du|/2 exactly, independent of phi: the singularity is one
            # dimensional and a graded map t -> t^g integrates it directly
            g = 3.0 / max(1.0 - w, 0.1)
            tg = t**g
            jw = wt * g * t ** (g - 1.0)
            DU, DP = np.meshgrid((ub - up) * tg, (pb - phip) * t, indexing="ij")
            F = eval_offsets(DU, DP)
            return abs(ub - up) * abs(pb - phip) * float(
                np.einsum("i,j,ij->", jw, wt, F)
            ) / (4 * math.pi)

        def corner_shells(ub, pb):
            # interior pole: s is an anisotropic quadratic in the offsets, a
            # multiscale ridge no single tensor rule resolves; dyadic L-shells
            # localize the scale and a quadratic-form core closes the sum
            hu, hp = ub - up, pb - phip
            jac = abs(hu) * abs(hp)

            def frac_rect(x0, x1, y0, y1):
                XI = x0 + (x1 - x0) * t
                ETA = y0 + (y1 - y0) * t
                DU, DP = np.meshgrid(hu * XI, hp * ETA, indexing="ij")
                F = eval_offsets(DU, DP)
                return (x1 - x0) * (y1 - y0) * float(np.einsum("i,j,ij->", wt, wt, F))

            depth = 14
            total = 0.0
            for k in range(depth):
                a = 2.0 ** (-k)
                total += frac_rect(a / 2, a, 0.0, a) + frac_rect(0.0, a / 2, a / 2, a)
            a = 2.0 ** (-depth)
            c1 = 1.0 / (4.0 * rp2)
            c2 = rp2 / 4.0
            hu_c, hp_c = abs(hu) * a, abs(hp) * a
            lam = c2 * hp_c**2 / (c1 * hu_c**2)
            g0 = float(np.exp(self._log_raw(pole_xyz, exclude=m)))
            core = g0 * hu_c * hp_c * (c1 * hu_c**2) ** (-w) * _qform_unit_square(w, lam)
            return (jac * total + core) / (4 * math.pi)

        def corner_plain(ua, ub, pa, pb):
            # mild grading toward the corner nearest the (exterior) pole
            g = 3.0
            tg = t**g
            jw = wt * g * t ** (g - 1.0)
            U, P = np.meshgrid(ua + (ub - ua) * tg, pa + (pb - pa) * tg, indexing="ij")
            R = np.sqrt(np.clip(1 - U * U, 0, None))
            X = np.stack([R * np.cos(P), R * np.sin(P), U], axis=-1)
            F = np.exp(self._log_raw(X))
            return abs(ub - ua) * abs(pb - pa) * float(
                np.einsum("i,j,ij->", jw, jw, F)
            ) / (4 * math.pi)

        if u0 <= up <= u1 and p0 <= phip <= p1:
            corner = corner_polar if polar else corner_shells
            total = 0.0
            phi_ends = (p1,) if polar else (p0, p1)
            for ub in (u0, u1):
                for pb in phi_ends:
                    if abs(ub - up) > 0 and abs(pb - phip) > 0:
                        total += corner(ub, pb)
            return total
        ua, ub = (u0, u1) if abs(u0 - up) < abs(u1 - up) else (u1, u0)
        pa, pb = (p0, p1) if abs(p0 - phip) < abs(p1 - phip) else (p1, p0)
        return corner_plain(ua, ub, pa, pb)

    # -- public evaluation ---------------------------------------------------

    @property
    def log_norm(self) -> float:
        """log of the normalizing constant applied to the raw density."""
        return self._log_norm

    def log_density_sphere(self, xyz: np.ndarray) -> np.ndarray:
        """log(dV / dFS) at unit vectors; -inf impossible, +inf at divisor points."""
        return self._log_raw(xyz) - self._log_norm

    def log_density_chart(self, p: SpherePoint) -> float:
        """log density against Lebesgue measure in the point's canonical chart."""
        return float(self.log_density_sphere(p.xyz)) + math.log(fs_density(p))

    def cell_masses(self, grid: SphereGrid) -> np.ndarray:
        """dV mass per grid cell; singular cells carry their integrated mass."""
        return self._raw_cell_integrals(grid) * math.exp(-self._log_norm)

    def density_grid(self, grid: SphereGrid) -> DensityGrid:
        return DensityGrid.normalized(grid, self.cell_masses(grid))
