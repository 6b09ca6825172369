"""Macroscopic side of the gas: potentials, the curvature equation, energies.

Everything here lives on one SphereGrid.  A potential phi is a vector of
values at cell centers; its curvature cell masses are

    omega_phi = omega0 + ddc(phi),

with omega0 the bundle curvature masses (total V = degree) and ddc the grid
operator.  MA(phi) = omega_phi / V is then a probability vector whenever the
curvature stays nonnegative.  Conventions, fixed for the whole module:

* Gauge.  Potentials are mean-zero against the Fubini-Study area; on the
  equal-area grid that is the plain mean.  Quantities that must not be
  shifted (obstacle envelopes, test inputs phi + c) carry gauge 'free'.
* Potential energy  ee(phi) = (1/2V) <phi, omega0 + omega_phi>,  ee(0) = 0,
  with directional derivative <v, MA(phi)>.
* Measure energy  E(mu) = ee(phi_mu) - <phi_mu, mu>  where phi_mu solves
  ddc(phi) = V mu - omega0.  Expanding gives E(mu) = -(1/2V) <phi_mu, ddc
  phi_mu> >= 0 with equality only at mu = omega0/V.  The 'green' method
  evaluates the same quadratic form through the pair kernel -log ch^2
  instead of the discrete solve; the two differ only by discretization.
* Free energy  F_beta(mu) = beta E(mu) + D(mu),  entropy relative to the
  base measure dV.  Its minimizer solves omega_phi = e^{beta phi} dV up to
  normalization; ma_solve finds that potential by damped Newton steps, with
  continuation in beta on the attractive side.

The solver works with the unnormalized equation omega0 + ddc(phi) =
e^{beta phi} b, b scaled to total mass V.  Any solution automatically has
the right total mass (both sides sum to V), the reported potential is then
shifted to the mean-zero gauge and the normalization Z = sum e^{beta phi} b
is reported rather than absorbed.  The Jacobian ddc - beta diag(e^{beta
phi} b) is sparse and, for beta > 0, strictly negative definite, so Newton
with backtracking is globally safe there; for beta < 0 it loses
definiteness at a fold, which is exactly the empirical stability threshold
the continuation reports on failure.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve
from scipy.special import logsumexp

from .geometry import (
    BaseMeasure,
    BundleMetric,
    DensityGrid,
    SphereGrid,
    green_constant,
    grid_build,
)

__all__ = [
    "MeanFieldError",
    "PotentialGrid",
    "FunctionalReport",
    "MASolution",
    "poisson_solve",
    "ma_solve",
    "ma_measure",
    "energy_of_potential",
    "energy_of_measure",
    "entropy",
    "free_energy",
    "psh_projection",
    "ding_mabuchi",
    "free_energy_infimum",
]


class MeanFieldError(ValueError):
    """Solver failure or invalid macroscopic data.

    Continuation failures carry the last good parameter and potential in
    `last_beta` and `potential` so the caller can read off the empirical
    stability threshold.
    """

    def __init__(self, message, last_beta=None, potential=None, path=None):
        super().__init__(message)
        self.last_beta = last_beta
        self.potential = potential
        self.path = path


# ------------------------------------------------------------- potentials ----

_GAUGES = ("fs-mean-zero", "free")


@dataclass
class PotentialGrid:
    """Values of a potential at grid cells, with a declared gauge.

    'fs-mean-zero' is the reporting gauge of the solvers: the plain mean of
    the values vanishes (equal-area cells make that the FS mean).  'free'
    marks values whose additive constant carries meaning and must be kept,
    such as obstacle envelopes pinned to their obstacle.
    """

    grid: SphereGrid
    values: np.ndarray
    gauge: str = "fs-mean-zero"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape != (self.grid.n,):
            raise MeanFieldError(f"values shape {v.shape} != grid size {self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise MeanFieldError("potential values must be finite")
        if self.gauge not in _GAUGES:
            raise MeanFieldError(f"unknown gauge {self.gauge!r}; use one of {_GAUGES}")
        if self.gauge == "fs-mean-zero" and abs(v.mean()) > 1e-10:
            raise MeanFieldError(
                f"gauge violation: FS mean is {v.mean():.3e}, must vanish to 1e-10"
            )
        self.values = v

    def gauged(self) -> "PotentialGrid":
        """Mean-zero representative (drops the additive constant)."""
        v = self.values - self.values.mean()
        return PotentialGrid(self.grid, v, "fs-mean-zero")

    def to_csv(self, path) -> None:
        """Columns: cell_index, phi."""
        with open(path, "w") as f:
            f.write(
                f"# sphere-grid nu={self.grid.nu} nphi={self.grid.nphi} "
                f"gauge={self.gauge}\n"
            )
            f.write("cell_index,phi\n")
            for c, v in enumerate(self.values):
                f.write(f"{c},{v:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "PotentialGrid":
        with open(path) as f:
            header = f.readline()
            if not header.startswith("# sphere-grid"):
                raise MeanFieldError("missing grid header line in potential CSV")
            kv = dict(tok.split("=") for tok in header.split()[2:])
            grid = SphereGrid(int(kv["nu"]), int(kv["nphi"]))
            body = f.read()
        data = np.genfromtxt(io.StringIO(body), delimiter=",", names=True)
        values = np.zeros(grid.n)
        values[data["cell_index"].astype(int)] = data["phi"]
        return cls(grid, values, kv.get("gauge", "fs-mean-zero"))


def _values(phi) -> np.ndarray:
    if isinstance(phi, PotentialGrid):
        return phi.values
    return np.asarray(phi, dtype=float).ravel()


def _base_masses(base, grid: SphereGrid) -> np.ndarray:
    """Cell masses of the reference measure on `grid`, summing to ~1."""
    if isinstance(base, BaseMeasure):
        return base.cell_masses(grid)
    if isinstance(base, DensityGrid):
        if (base.grid.nu, base.grid.nphi) != (grid.nu, grid.nphi):
            raise MeanFieldError(
                f"base measure grid {base.grid.nu}x{base.grid.nphi} does not match "
                f"{grid.nu}x{grid.nphi}"
            )
        return base.masses
    raise MeanFieldError(f"base must be a BaseMeasure or DensityGrid, got {type(base)!r}")


# ---------------------------------------------------------- linear solves ----

def poisson_solve(rho: DensityGrid, omega0: BundleMetric) -> PotentialGrid:
    """Potential of a measure: solve ddc(phi) = V rho - omega0, mean-zero.

    The right-hand side has zero total mass by construction (both terms
    carry mass V), which is the solvability condition on a closed surface.
    """
    grid = rho.grid
    rhs = omega0.degree * rho.masses - omega0.curvature_masses(grid)
    phi = grid.poisson_solve(rhs)
    res = float(np.abs(grid.ddc_apply(phi) - rhs).sum())
    if res > 1e-8:
        raise MeanFieldError(f"poisson residual {res:.3e} exceeds 1e-8")
    return PotentialGrid(grid, phi)


def ma_measure(phi, omega0: BundleMetric, grid: SphereGrid | None = None) -> DensityGrid:
    """Normalized curvature measure (omega0 + ddc(phi)) / V of a potential."""
    if isinstance(phi, PotentialGrid) and grid is None:
        grid = phi.grid
    if grid is None:
        raise MeanFieldError("ma_measure needs a grid when phi is a bare array")
    v = _values(phi)
    masses = omega0.curvature_masses(grid) + grid.ddc_apply(v)
    if masses.min() < -1e-12 * omega0.degree:
        raise MeanFieldError(
            f"potential is not admissible: curvature mass {masses.min():.3e} < 0"
        )
    return DensityGrid.normalized(grid, masses)


# ------------------------------------------------------------------ energy ----

def energy_of_potential(phi, omega0: BundleMetric, grid: SphereGrid | None = None) -> float:
    """Primitive of the curvature map: (1/2V) <phi, omega0 + omega_phi>.

    Vanishes at phi = 0 and shifts by exactly c under phi -> phi + c; its
    directional derivative at phi in direction v is <v, MA(phi)>.
    """
    if isinstance(phi, PotentialGrid) and grid is None:
        grid = phi.grid
    if grid is None:
        raise MeanFieldError("energy_of_potential needs a grid when phi is a bare array")
    v = _values(phi)
    om0 = omega0.curvature_masses(grid)
    return float(v @ (2.0 * om0 + grid.ddc_apply(v))) / (2.0 * omega0.degree)


def _green_quadratic(grid: SphereGrid, nu_vec: np.ndarray, block: int = 512) -> float:
    """<nu, G nu> for the pair kernel G = -log ch^2 + C, in row blocks.

    The diagonal uses the mean of the kernel over two independent points in
    one cell: for a cell of area mass m the chordal square to a uniform
    point behaves like a uniform variable on scale m, giving
    E[-log ch^2] = -(log m - 1/2) exactly on round caps and to O(m) on the
    near-square cells of the grid.  On mass-zero nu the constant C cancels;
    it is kept so single rows match the Green function values.
    """
    x = grid.centers_xyz
    c0 = green_constant()
    diag = c0 - (math.log(grid.cell_mass) - 0.5)
    total = 0.0
    for i0 in range(0, grid.n, block):
        xb = x[i0:i0 + block]
        d = xb[:, None, :] - x[None, :, :]
        s = 0.25 * np.einsum("ijk,ijk->ij", d, d)
        with np.errstate(divide="ignore"):
            g = c0 - np.log(s)
        rows = np.arange(i0, min(i0 + block, grid.n))
        g[rows - i0, rows] = diag
        total += float(nu_vec[rows] @ (g @ nu_vec))
    return total


def energy_of_measure(mu: DensityGrid, omega0: BundleMetric, method: str = "potential") -> float:
    """Quadratic energy of a probability measure against the background.

    method 'potential' solves for phi_mu and evaluates ee(phi_mu) -
    <phi_mu, mu>; method 'green' sums the pair kernel over the deviation
    nu = mu - omega0/V.  Both are >= 0 with the minimum 0 at omega0/V.
    A cell carrying more than half the total mass is point-mass-like: the
    value is dominated by the diagonal regularization, so it is flagged.
    """
    grid = mu.grid
    if mu.masses.max() > 0.5:
        warnings.warn(
            f"measure has a cell of mass {mu.masses.max():.3f} > 0.5; energy is "
            "dominated by the single-cell regularization and unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    if method == "potential":
        phi = poisson_solve(mu, omega0)
        return energy_of_potential(phi, omega0) - float(phi.values @ mu.masses)
    if method == "green":
        nu_vec = mu.masses - omega0.curvature_masses(grid) / omega0.degree
        return 0.5 * omega0.degree * _green_quadratic(grid, nu_vec)
    raise MeanFieldError(f"unknown energy method {method!r}; use 'potential' or 'green'")


def entropy(mu: DensityGrid, base) -> float:
    """Relative entropy sum m_i log(m_i / b_i); +inf off the base support."""
    b = _base_masses(base, mu.grid)
    m = mu.masses
    live = m > 0.0
    if np.any(live & (b <= 0.0)):
        return math.inf
    return float(np.sum(m[live] * (np.log(m[live]) - np.log(b[live]))))


def free_energy(mu: DensityGrid, beta: float, base, omega0: BundleMetric,
                method: str = "potential") -> float:
    """beta E(mu) + D(mu).

    On a finite grid every measure has finite energy, so the attractive-side
    convention (value +inf when the energy diverges) acts only through the
    entropy term, which is +inf off the support of the base.
    """
    d = entropy(mu, base)
    if math.isinf(d):
        return math.inf
    return beta * energy_of_measure(mu, omega0, method) + d


# --------------------------------------------------------- curvature solve ----

@dataclass
class MASolution:
    """Solution of the curvature equation omega_phi = V e^{beta phi} dV / Z.

    potential is in the mean-zero gauge; z_norm is the normalization Z of
    the minimizing measure in that gauge; path records one continuation row
    (beta, newton iterations, residual) per accepted step.  residual is the
    l1 mass defect of the final equation, relative to nothing: absolute.
    """

    potential: PotentialGrid
    measure: DensityGrid
    beta: float
    z_norm: float
    residual: float
    newton_iterations: int
    path: tuple

    def path_to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("beta,newton_iterations,residual\n")
            for b, it, res in self.path:
                f.write(f"{b:.17g},{it},{res:.17g}\n")


def _newton(beta: float, phi0: np.ndarray, L, om0: np.ndarray, b_scaled: np.ndarray,
            tol: float, max_iter: int):
    """Damped Newton on F(phi) = om0 + L phi - e^{beta phi} b_scaled.

    Returns (ok, phi, iterations, residual).  Failure means the linearized
    operator could not be factored or backtracking stalled, which near a
    fold is the expected signal, not an accident.
    """
    phi = phi0.copy()
    with np.errstate(over="ignore"):
        w = np.exp(beta * phi) * b_scaled
    F = om0 + L @ phi - w
    fn = float(np.abs(F).sum())
    if not math.isfinite(fn):
        return False, phi0, 0, math.inf
    for it in range(max_iter):
        if fn < tol:
            return True, phi, it, fn
        J = (L - sparse.diags(beta * w)).tocsc()
        try:
            delta = splu(J).solve(-F)
        except RuntimeError:
            return False, phi, it, fn
        if not np.all(np.isfinite(delta)):
            return False, phi, it, fn
        lam, accepted = 1.0, False
        for _ in range(25):
            cand = phi + lam * delta
            with np.errstate(over="ignore"):
                w_c = np.exp(beta * cand) * b_scaled
            F_c = om0 + L @ cand - w_c
            fn_c = float(np.abs(F_c).sum())
            if math.isfinite(fn_c) and fn_c < fn * (1.0 - 1e-4 * lam):
                phi, w, F, fn, accepted = cand, w_c, F_c, fn_c, True
                break
            lam *= 0.5
        if not accepted:
            return False, phi, it, fn
    return fn < tol, phi, max_iter, fn


def ma_solve(beta: float, base, omega0: BundleMetric, grid: SphereGrid | None = None, *,
             tol: float = 1e-10, step: float = 0.05, step_floor: float = 1e-4,
             max_newton: int = 40, initial=None) -> MASolution:
    """Solve the curvature equation at inverse temperature beta.

    For beta >= 0 a single damped Newton run from the linearized seed
    converges (the operator is monotone); failures fall back to parameter
    continuation automatically.  For beta < 0 the path starts at 0 and
    advances in steps of at most `step`, halving on Newton failure; when
    the step falls below `step_floor` the equation is deemed unsolvable
    beyond the last good beta and that value is reported in the error.

    `base` is a BaseMeasure or a DensityGrid of cell masses; `initial` seeds
    the first Newton run (mean-zero values, used for uniqueness checks).
    """
    if not math.isfinite(beta):
        raise MeanFieldError(f"beta must be finite, got {beta}")
    if grid is None:
        grid = grid_build(4096)
    V = omega0.degree
    b = _base_masses(base, grid)
    if b.min() < 0.0 or b.sum() <= 0.0:
        raise MeanFieldError("base measure masses must be nonnegative with positive total")
    b_scaled = b * (V / b.sum())
    om0 = omega0.curvature_masses(grid)
    L = grid.ddc_matrix()
    tol_abs = tol * V

    if initial is not None:
        phi = _values(initial).copy()
        if phi.shape != (grid.n,):
            raise MeanFieldError(f"initial guess shape {phi.shape} != grid size {grid.n}")
    else:
        # beta = 0 linearization: L phi = b_scaled - om0, exact seed
        phi = grid.poisson_solve(b_scaled - om0)
    path = []
    if beta == 0.0:
        res = float(np.abs(grid.ddc_apply(phi) - (b_scaled - om0)).sum())
        path.append((0.0, 0, res))
        current = 0.0
        total_iters = 0
    else:
        current = 0.0
        total_iters = 0
        dstep = abs(beta) if beta > 0 else min(step, abs(beta))
        while current != beta:
            trial = current + math.copysign(min(dstep, abs(beta - current)), beta)
            if abs(beta - trial) < 1e-12 * max(1.0, abs(beta)):
                trial = beta
            ok, phi_new, iters, res = _newton(trial, phi, L, om0, b_scaled, tol_abs, max_newton)
            if ok:
                current, phi = trial, phi_new
                total_iters += iters
                path.append((trial, iters, res))
                if beta < 0:
                    dstep = min(dstep * 2.0, step)
            else:
                dstep *= 0.5
                if dstep < step_floor:
                    last = PotentialGrid(grid, phi - phi.mean())
                    raise MeanFieldError(
                        f"no solution reached: continuation stalled at beta = "
                        f"{current:.6g} on the way to {beta:.6g} (step below "
                        f"{step_floor:g})",
                        last_beta=current,
                        potential=last,
                        path=tuple(path),
                    )

    phi = phi - phi.mean()
    b_prob = b / b.sum()
    weights = np.exp(beta * phi) * b_prob
    z = float(weights.sum())
    measure = DensityGrid.normalized(grid, weights)
    residual = float(np.abs(om0 + grid.ddc_apply(phi) - V * measure.masses).sum())
    if residual > 10.0 * tol_abs:
        raise MeanFieldError(f"curvature equation residual {residual:.3e} after gauge shift")
    return MASolution(
        potential=PotentialGrid(grid, phi),
        measure=measure,
        beta=beta,
        z_norm=z,
        residual=residual,
        newton_iterations=total_iters,
        path=tuple(path),
    )


# ------------------------------------------------------------ psh envelope ----

def psh_projection(u, omega0: BundleMetric, grid: SphereGrid | None = None, *,
                   max_iter: int = 200) -> PotentialGrid:
    """Largest potential with nonnegative curvature below the obstacle u.

    Complementarity formulation: on the contact set the envelope equals u
    and the curvature mass is free to be positive; off it the curvature
    mass vanishes.  The active set is updated by releasing contact cells
    with negative multiplier and capturing cells that cross the obstacle;
    each pass solves the curvature-free equation on the inactive block.
    The result keeps the obstacle's additive constant (gauge 'free').
    """
    if isinstance(u, PotentialGrid) and grid is None:
        grid = u.grid
    if grid is None:
        raise MeanFieldError("psh_projection needs a grid when u is a bare array")
    uv = _values(u)
    if uv.shape != (grid.n,):
        raise MeanFieldError(f"obstacle shape {uv.shape} != grid size {grid.n}")
    if not np.all(np.isfinite(uv)):
        raise MeanFieldError("obstacle must be finite")
    om0 = omega0.curvature_masses(grid)
    L = grid.ddc_matrix().tocsr()
    scale = max(1.0, float(np.abs(uv).max()))
    tol_u = 1e-12 * scale
    tol_r = 1e-14 * omega0.degree

    active = np.ones(grid.n, dtype=bool)
    phi = uv.copy()
    for _ in range(max_iter):
        idx = np.flatnonzero(~active)
        phi = uv.copy()
        if idx.size:
            # inactive block: total curvature mass there is forced to zero
            sub = L[idx][:, idx].tocsc()
            rhs = -(om0[idx] + L[idx] @ uv - sub @ uv[idx])
            phi[idx] = spsolve(sub, rhs)
        r = om0 + L @ phi
        nxt = active.copy()
        nxt[active & (r < -tol_r)] = False
        if idx.size:
            nxt[idx[phi[idx] > uv[idx] + tol_u]] = True
        if np.array_equal(nxt, active):
            return PotentialGrid(grid, np.minimum(phi, uv), gauge="free")
        active = nxt
    r = om0 + L @ phi
    raise MeanFieldError(
        f"envelope iteration did not settle in {max_iter} passes; "
        f"worst multiplier {float(r.min()):.3e}, worst overshoot "
        f"{float((phi - uv).max()):.3e}"
    )


# -------------------------------------------------------------- functionals ----

@dataclass
class FunctionalReport:
    """All the scalar functionals of one potential at one temperature.

    e_phi    potential energy ee(phi)
    e_mu     measure energy E(mu) at mu = MA(phi)
    d_mu     relative entropy D(mu) against the base
    f_beta   free energy beta e_mu + d_mu, equal to mabuchi by definition
    ding     -ee(phi) - log int e^{-phi} dV
    mabuchi  free energy of MA(phi)
    i_phi    (1/V) <phi, omega0 - omega_phi>
    j_phi    (1/V) <phi, omega0> - ee(phi)
    gamma    attractive-side parameter of the duality gap (\-beta, or 1)
    g_gamma  ee(phi) + (1/gamma) log int e^{-gamma phi} dV
    gap      F_{-gamma}(MA(phi))/gamma + g_gamma, a relative entropy >= 0

    The identity e_mu = i_phi - j_phi holds exactly on the grid; gap
    vanishes precisely when phi solves the curvature equation at -gamma.
    """

    e_phi: float
    e_mu: float
    d_mu: float
    f_beta: float
    ding: float
    mabuchi: float
    i_phi: float
    j_phi: float
    gamma: float
    g_gamma: float
    gap: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def ding_mabuchi(phi, beta: float, base, omega0: BundleMetric,
                 grid: SphereGrid | None = None) -> FunctionalReport:
    """Evaluate the functional family at one potential.

    The duality gap is computed at gamma = -beta when beta < 0, else at
    gamma = 1 (where it reads: free energy at -1 minus the Ding value).
    The free energy enters the gap divided by gamma; that is the scaling
    under which the gap equals the relative entropy between MA(phi) and
    the Gibbs measure e^{-gamma phi} dV / Z, hence is nonnegative and
    vanishes exactly at the critical potential.
    """
    if isinstance(phi, PotentialGrid) and grid is None:
        grid = phi.grid
    if grid is None:
        raise MeanFieldError("ding_mabuchi needs a grid when phi is a bare array")
    v = _values(phi)
    V = omega0.degree
    b = _base_masses(base, grid)
    b_prob = b / b.sum()
    om0 = omega0.curvature_masses(grid)
    ddc_v = grid.ddc_apply(v)

    mu = ma_measure(v, omega0, grid)
    e_phi = float(v @ (2.0 * om0 + ddc_v)) / (2.0 * V)
    e_mu = energy_of_measure(mu, omega0)
    d_mu = entropy(mu, base)
    f_beta = beta * e_mu + d_mu
    i_phi = -float(v @ ddc_v) / V
    j_phi = float(v @ om0) / V - e_phi

    live = b_prob > 0.0
    log_b = np.full(grid.n, -math.inf)
    log_b[live] = np.log(b_prob[live])
    ding = -e_phi - float(logsumexp(-v + log_b))
    gamma = -beta if beta < 0 else 1.0
    g_gamma = e_phi + float(logsumexp(-gamma * v + log_b)) / gamma
    f_neg = -gamma * e_mu + d_mu
    gap = f_neg / gamma + g_gamma
    return FunctionalReport(
        e_phi=e_phi, e_mu=e_mu, d_mu=d_mu, f_beta=f_beta, ding=ding,
        mabuchi=f_beta, i_phi=i_phi, j_phi=j_phi, gamma=gamma,
        g_gamma=g_gamma, gap=gap,
    )


# ------------------------------------------------------------ model bridge ----

def free_energy_infimum(model, beta: float, *, resolution: int = 4096,
                        grid: SphereGrid | None = None) -> float:
    """Minimum of the free energy for a gas model's macroscopic data.

    Solves the curvature equation with the model's base measure and bundle
    curvature and evaluates the free energy at the minimizer.  For round
    data the seed already solves the equation and the value is exactly 0.
    On the attractive side a continuation failure propagates as
    MeanFieldError carrying the empirical threshold.
    """
    if grid is None:
        grid = grid_build(resolution)
    sol = ma_solve(beta, model.base, model.bundle, grid)
    return free_energy(sol.measure, beta, model.base, model.bundle)
