"""Metropolis sampling of the N-point ensembles and their one-point output.

The chain moves one particle at a time with a mixed proposal: with
probability p_global an independence draw aimed at the base measure dV, else
a local geodesic step of Gaussian length in a uniform tangent direction.
Local steps have a symmetric kernel (the density depends only on the
distance), so their Hastings correction vanishes; global steps use the exact
proposal density.  For the round base and for a single divisor point the
independence draw realizes dV exactly (chordal square from a fixed point is
Uniform[0,1] under the round measure, so the single-pole law is a Beta pull
back); for several divisor points no closed-form dV sampler exists and the
draw is a uniform/pole mixture with the same singularity structure and an
exactly known density.

Per-particle state is cached (pairwise log chordal matrix, perturbation and
base-density vectors), giving O(N) work per step; the cache is recomputed
from scratch every 10^4 steps and the run aborts if the incremental totals
have drifted beyond 1e-8.  Proposals landing exactly on another particle or
on a divisor pole are rejected outright: both events have measure zero, and
at negative beta an exact pole hit would otherwise trap the chain at a
log-density of +inf.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .energy import ModelSpec
from .geometry import DensityGrid, SphereGrid, chordal_sq, grid_build

_TWO_PI = 2.0 * math.pi


class SamplerError(ValueError):
    """Invalid chain request or a corrupted chain state."""


# ------------------------------------------------------------ configuration --

@dataclass(frozen=True)
class ChainConfig:
    """Run plan for one ensemble: lengths, proposal mix, seed, thinning.

    sigma None means the local scale is tuned during burn-in toward 30-50%
    acceptance and then frozen; thinning None means the energy
    autocorrelation time is measured on a pilot stretch after burn-in and
    used as the keep interval.  chains > 1 runs that many independent chains
    from spawned seeds and merges them in chain order.
    """

    model: ModelSpec
    steps: int
    burn_in: int = 1000
    p_global: float = 0.2
    sigma: float | None = None
    seed: int = 0
    thinning: int | None = None
    chains: int = 2

    def __post_init__(self):
        if not (self.steps > self.burn_in >= 0):
            raise SamplerError(
                f"need steps > burn_in >= 0, got {self.steps}, {self.burn_in}"
            )
        if not (0.0 <= self.p_global <= 1.0):
            raise SamplerError(f"p_global {self.p_global} outside [0, 1]")
        if self.sigma is not None and not (self.sigma > 0.0):
            raise SamplerError(f"sigma must be positive, got {self.sigma}")
        if self.thinning is not None and self.thinning < 1:
            raise SamplerError(f"thinning must be >= 1, got {self.thinning}")
        if self.chains < 1:
            raise SamplerError(f"chains must be >= 1, got {self.chains}")


# ----------------------------------------------------------------- proposal --

class _GlobalProposal:
    """Independence proposal for one particle, with its exact log density.

    exact_dv means the draw is distributed as the base measure itself, so
    target base terms and proposal terms cancel identically in the Metropolis
    ratio and are skipped rather than round-tripped through logs.
    """

    def __init__(self, model: ModelSpec):
        self.base = model.base
        div = model.divisor
        self.exact_dv = div is None or len(div) == 1
        if div is None:
            self.points = None
        else:
            self.points = div.points_xyz
            self.weights = np.asarray(div.weights, dtype=float)
            self.frames = [_north_frame(p) for p in self.points]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.points is None:
            return _uniform_one(rng)
        m = len(self.weights)
        if self.exact_dv or rng.random() < 0.5:
            # single pole: s = ch^2 from the pole is Beta(1-w, 1) under dV
            if self.exact_dv:
                k = 0
            else:
                k = int(rng.integers(m))
            s = rng.random() ** (1.0 / (1.0 - self.weights[k]))
            psi = rng.uniform(0.0, _TWO_PI)
            u = 1.0 - 2.0 * s
            r = math.sqrt(max(1.0 - u * u, 0.0))
            y = np.array([r * math.cos(psi), r * math.sin(psi), u])
            return self.frames[k] @ y
        return _uniform_one(rng)

    def log_q(self, y: np.ndarray) -> float:
        """log proposal density against the uniform measure."""
        if self.points is None:
            return 0.0
        s = np.clip(chordal_sq(y[None, :], self.points), 1e-300, None)
        comps = (1.0 - self.weights) * s ** (-self.weights)
        if self.exact_dv:
            return float(np.log(comps[0]))
        return float(np.log(0.5 + 0.5 * comps.mean()))


def _uniform_one(rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, _TWO_PI)
    r = math.sqrt(max(1.0 - u * u, 0.0))
    return np.array([r * math.cos(phi), r * math.sin(phi), u])


def _north_frame(p: np.ndarray) -> np.ndarray:
    """Rotation matrix taking the north pole to p."""
    p = np.asarray(p, dtype=float)
    e1, e2 = _tangent_frame(p)
    return np.column_stack([e1, e2, p])


def _tangent_frame(x: np.ndarray):
    h = np.array([0.0, 0.0, 1.0]) if abs(x[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = h - np.dot(h, x) * x
    e1 = e1 / np.linalg.norm(e1)
    return e1, np.cross(x, e1)


# -------------------------------------------------------------- chain state --

class ChainState:
    """One microstate plus the caches that make a step O(N).

    logch[i, j] = log ch^2(x_i, x_j) with zero diagonal; pair_sum is its
    upper-triangle sum, u_sum the perturbation sum, rho_sum the base
    log-density sum.  verify() recomputes everything and raises if the
    incremental bookkeeping has drifted by more than the tolerance.
    """

    __slots__ = ("model", "beta", "xyz", "logch", "uvals", "logrho",
                 "pair_sum", "u_sum", "rho_sum", "proposal",
                 "n_steps", "n_accepted")

    def __init__(self, model: ModelSpec, xyz: np.ndarray, beta: float | None = None):
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        if xyz.shape[0] != model.n_points:
            raise SamplerError(
                f"{xyz.shape[0]} points for a model with N = {model.n_points}"
            )
        self.model = model
        self.beta = model.beta if beta is None else float(beta)
        self.xyz = xyz.copy()
        self.proposal = _GlobalProposal(model)
        self.n_steps = 0
        self.n_accepted = 0
        self._recompute()
        if not math.isfinite(self.pair_sum + self.rho_sum + self.u_sum):
            raise SamplerError("initial configuration sits on a singular locus")

    @classmethod
    def from_uniform(cls, model: ModelSpec, rng: np.random.Generator,
                     beta: float | None = None) -> "ChainState":
        u = rng.uniform(-1.0, 1.0, model.n_points)
        phi = rng.uniform(0.0, _TWO_PI, model.n_points)
        r = np.sqrt(np.clip(1.0 - u * u, 0.0, None))
        xyz = np.column_stack([r * np.cos(phi), r * np.sin(phi), u])
        return cls(model, xyz, beta)

    def _recompute(self):
        n = self.xyz.shape[0]
        s = chordal_sq(self.xyz[:, None, :], self.xyz[None, :, :])
        with np.errstate(divide="ignore"):
            self.logch = np.log(np.where(np.eye(n, dtype=bool), 1.0, s))
        self.pair_sum = float(self.logch.sum() / 2.0)
        self.uvals = self.model.bundle.u_values(self.xyz)
        self.u_sum = float(self.uvals.sum())
        self.logrho = self.model.base.log_density_sphere(self.xyz)
        self.rho_sum = float(self.logrho.sum())

    @property
    def n_points(self) -> int:
        return self.xyz.shape[0]

    @property
    def acceptance(self) -> float:
        return self.n_accepted / max(self.n_steps, 1)

    def log_density(self) -> float:
        """log of the unnormalized target against the uniform product measure."""
        if self.beta == 0.0:
            return self.rho_sum
        return (self.beta / self.model.k) * self.pair_sum \
            - self.beta * self.u_sum + self.rho_sum

    def energy(self) -> float:
        """E^(N) of the current configuration, from the caches."""
        k, n = self.model.k, self.n_points
        return -(self.pair_sum - k * self.u_sum) / (k * n)

    def verify(self, tol: float = 1e-8):
        """Abort if the incremental caches have drifted; else resync exactly."""
        pair, u_, rho = self.pair_sum, self.u_sum, self.rho_sum
        self._recompute()
        scale = max(1.0, abs(self.pair_sum), abs(self.rho_sum))
        drift = max(abs(pair - self.pair_sum), abs(u_ - self.u_sum),
                    abs(rho - self.rho_sum))
        if not (drift <= tol * scale):
            raise SamplerError(
                f"cache drift {drift:.3e} exceeds {tol:.0e} after "
                f"{self.n_steps} steps"
            )


def metropolis_step(state: ChainState, rng: np.random.Generator, *,
                    p_global: float = 0.2, sigma: float = 0.5) -> ChainState:
    """One single-particle update; mutates and returns the state.

    state.n_steps / n_accepted track the acceptance rate.  A proposal whose
    log target is non-finite (exact collision or pole hit) is rejected.
    """
    i = int(rng.integers(state.n_points))
    x_old = state.xyz[i]
    is_global = rng.random() < p_global
    if is_global:
        y = state.proposal.sample(rng)
    else:
        t = abs(rng.normal(0.0, sigma))
        psi = rng.uniform(0.0, _TWO_PI)
        e1, e2 = _tangent_frame(x_old)
        y = math.cos(t) * x_old + math.sin(t) * (
            math.cos(psi) * e1 + math.sin(psi) * e2
        )
        y = y / np.linalg.norm(y)

    new_row = chordal_sq(y[None, :], state.xyz)
    new_row[i] = 1.0                       # diagonal slot, log -> 0
    with np.errstate(divide="ignore"):
        new_row = np.log(new_row)
    u_new = float(state.model.bundle.u_values(y[None, :])[0])
    rho_new = float(state.model.base.log_density_sphere(y[None, :])[0])

    state.n_steps += 1
    finite = bool(np.isfinite(new_row).all()) and math.isfinite(u_new) \
        and math.isfinite(rho_new)
    if not finite:
        return state

    d_pair = float(new_row.sum() - state.logch[i].sum())
    d_u = u_new - float(state.uvals[i])
    d_rho = rho_new - float(state.logrho[i])
    beta, k = state.beta, state.model.k
    log_acc = 0.0 if beta == 0.0 else (beta / k) * d_pair - beta * d_u
    if is_global and state.proposal.exact_dv:
        pass                               # proposal density == base density
    elif is_global:
        log_acc += d_rho
        log_acc += state.proposal.log_q(x_old) - state.proposal.log_q(y)
    else:
        log_acc += d_rho

    if log_acc >= 0.0 or math.log(rng.random()) < log_acc:
        state.xyz[i] = y
        state.logch[i, :] = new_row
        state.logch[:, i] = new_row
        state.pair_sum += d_pair
        state.uvals[i] = u_new
        state.u_sum += d_u
        state.logrho[i] = rho_new
        state.rho_sum += d_rho
        state.n_accepted += 1
    return state


# ------------------------------------------------------------------- traces --

@dataclass(frozen=True)
class TraceStats:
    """Chain diagnostics: acceptance, kept-sample energies, mixing, mean."""

    acceptance: float
    energies: np.ndarray
    iat: float
    mean_energy: float
    mean_energy_se: float
    n_batches: int
    flag: str = ""


@dataclass(frozen=True)
class SampleRun:
    """Thinned samples with diagnostics from one or more merged chains."""

    samples: np.ndarray                 # (S, N, 3)
    stats: TraceStats
    config: ChainConfig
    beta: float
    sigma: float
    thinning: int
    step_energies: np.ndarray           # every post-burn-in step, chain-major
    step_accepts: np.ndarray
    chain_length: int                   # post-burn-in steps per chain

    def trace_to_csv(self, path) -> None:
        """Per-step trace: step, energy, accepted (post burn-in, all chains)."""
        with open(path, "w") as f:
            f.write("step,energy,accepted\n")
            for s, (e, a) in enumerate(zip(self.step_energies, self.step_accepts)):
                f.write(f"{s},{e:.17g},{int(a)}\n")

    def summary(self) -> dict:
        return {
            "seed": self.config.seed,
            "model": model_digest(self.config.model),
            "beta": self.beta,
            "chains": self.config.chains,
            "samples": int(self.samples.shape[0]),
            "acceptance": self.stats.acceptance,
            "sigma": self.sigma,
            "thinning": self.thinning,
            "iat": self.stats.iat,
            "mean_energy": self.stats.mean_energy,
            "mean_energy_se": self.stats.mean_energy_se,
            "flag": self.stats.flag,
        }

    def summary_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def model_digest(model: ModelSpec) -> str:
    """Short stable fingerprint of the model data (divisor included)."""
    import hashlib

    parts = [f"k={model.k!r}", f"degree={model.degree!r}", f"beta={model.beta!r}"]
    if model.divisor is not None:
        pts = np.round(model.divisor.points_xyz, 12)
        parts.append(f"divisor={pts.tolist()!r}:{tuple(model.divisor.weights)!r}")
    if model.perturbation is not None:
        probe = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
                          [0.0, 0.0, -1.0]])
        parts.append(f"u={np.round(model.bundle.u_values(probe), 12).tolist()!r}")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def integrated_autocorrelation(series, c: float = 6.0) -> float:
    """Self-consistent windowed autocorrelation time of a scalar trace.

    tau = 1 + 2 sum rho(t), truncated at the smallest window M >= c*tau(M);
    short or constant traces return 1.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 8:
        return 1.0
    x = x - x.mean()
    var = float(x @ x) / n
    if var <= 0.0 or not math.isfinite(var):
        return 1.0
    f = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    tau = 1.0
    for t in range(1, n):
        tau += 2.0 * float(rho[t])
        if t >= c * tau:
            break
    return max(tau, 1.0)


def _batch_stats(chains_energies, min_batches: int = 20):
    """Pooled batch-means estimate: (mean, se, n_batches, flag)."""
    per = max(1, math.ceil(min_batches / len(chains_energies)))
    means = []
    for e in chains_energies:
        b = min(per, e.size) if e.size else 0
        if b == 0:
            continue
        cut = (e.size // b) * b
        means.extend(e[:cut].reshape(b, -1).mean(axis=1))
    means = np.asarray(means, dtype=float)
    if means.size == 0:
        return math.nan, math.inf, 0, "empty-trace"
    mean = float(means.mean())
    if means.size < 2:
        return mean, math.inf, int(means.size), "few-batches"
    se = float(means.std(ddof=1) / math.sqrt(means.size))
    flag = ""
    if means.size < min_batches:
        se *= 2.0                        # widened: too few batches to trust
        flag = "few-batches"
    return mean, se, int(means.size), flag


def run_chain(cfg: ChainConfig, beta: float | None = None) -> SampleRun:
    """Run cfg.chains independent chains and merge them in chain order.

    Deterministic in cfg.seed.  Burn-in tunes sigma (when not pinned) toward
    30-50% acceptance; after burn-in a pilot stretch measures the energy
    autocorrelation time, which sets the keep interval unless cfg.thinning
    pins it.  Negative beta requires a Gibbs-stable model: the stratum oracle
    gamma_N must exceed |beta| or the target is not normalizable.
    """
    from .thermo import collision_strata

    model = cfg.model
    beta = model.beta if beta is None else float(beta)
    if beta < 0.0:
        gamma = collision_strata(model)[0][1]
        if -beta >= gamma:
            raise SamplerError(
                f"beta = {beta} at or beyond the stability threshold "
                f"gamma_N = {gamma:.6g}: Z diverges"
            )
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    post = cfg.steps - cfg.burn_in
    pilot = min(2000, max(10, post // 10))
    sigma = cfg.sigma if cfg.sigma is not None else 0.5
    thinning = cfg.thinning
    if thinning is None and post < 50:
        thinning = 1                     # too short for a pilot estimate

    all_samples = []
    all_energy = []
    all_accept = []
    kept_energy = []
    sigmas = []
    for seq in seeds:
        rng = np.random.default_rng(seq)
        state = ChainState.from_uniform(model, rng, beta)
        sig = sigma
        acc_win, win = 0, 0
        for step in range(cfg.burn_in):
            before = state.n_accepted
            metropolis_step(state, rng, p_global=cfg.p_global, sigma=sig)
            acc_win += state.n_accepted - before
            win += 1
            if cfg.sigma is None and win == 100:
                # log-scale nudge toward the 30-50% acceptance window
                sig = float(np.clip(sig * math.exp(acc_win / win - 0.4),
                                    1e-3, 2.0))
                acc_win, win = 0, 0
            if state.n_steps % 10_000 == 0:
                state.verify()
        state.n_steps = state.n_accepted = 0     # count post-burn-in only

        energies = np.empty(post)
        accepts = np.empty(post, dtype=bool)
        kept = []
        kept_e = []
        next_keep = None
        for step in range(post):
            before = state.n_accepted
            metropolis_step(state, rng, p_global=cfg.p_global, sigma=sig)
            energies[step] = state.energy()
            accepts[step] = state.n_accepted != before
            if (step + 1) % 10_000 == 0:
                state.verify()
            if thinning is None and step + 1 == pilot:
                iat0 = integrated_autocorrelation(energies[:pilot])
                thinning = int(np.clip(round(iat0), 1, max(1, post // 20)))
            if thinning is not None:
                if next_keep is None:
                    next_keep = step + thinning
                if step + 1 == next_keep:
                    kept.append(state.xyz.copy())
                    kept_e.append(energies[step])
                    next_keep += thinning
        state.verify()
        sigmas.append(sig)
        all_samples.append(np.array(kept).reshape(-1, model.n_points, 3))
        all_energy.append(energies)
        all_accept.append(accepts)
        kept_energy.append(np.asarray(kept_e))

    thinning = 1 if thinning is None else thinning
    mean, se, nb, flag = _batch_stats(all_energy)
    iat = float(np.mean([integrated_autocorrelation(e) for e in all_energy]))
    acc = float(np.concatenate(all_accept).mean())
    stats = TraceStats(acc, np.concatenate(kept_energy), iat, mean, se, nb, flag)
    return SampleRun(
        samples=np.concatenate(all_samples),
        stats=stats,
        config=cfg,
        beta=beta,
        sigma=float(np.mean(sigmas)),
        thinning=int(thinning),
        step_energies=np.concatenate(all_energy),
        step_accepts=np.concatenate(all_accept),
        chain_length=post,
    )


# ---------------------------------------------------------------- densities --

def _sample_xyz(samples) -> np.ndarray:
    if isinstance(samples, SampleRun):
        return samples.samples
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise SamplerError(f"samples shape {arr.shape} is not (S, N, 3)")
    if arr.shape[0] < 1:
        raise SamplerError("need at least one sample")
    return arr


def empirical_measure(samples, grid: SphereGrid | None = None) -> DensityGrid:
    """Bin every particle of every kept sample; total mass 1."""
    xyz = _sample_xyz(samples)
    if grid is None:
        grid = grid_build(512)
    counts = np.bincount(grid.bin_points(xyz.reshape(-1, 3)), minlength=grid.n)
    return DensityGrid.normalized(grid, counts.astype(float))


def one_point_density(source, grid: SphereGrid | None = None, *,
                      beta: float | None = None,
                      fine_factor: int = 3) -> DensityGrid:
    """One-point correlation density: MCMC estimate, or exact for N <= 3.

    Passing samples (or a SampleRun) pools all particles, which is the
    empirical estimate of the expected empirical measure.  Passing a
    ModelSpec computes the marginal by quadrature: rotation-invariant models
    are uniform by symmetry; a general N = 2 model integrates the second
    particle over a fine grid with the base cell masses carrying the poles
    (exact at the output cells' own poles too, since the output is quoted in
    base cell masses).  Non-invariant N = 3 needs samples.
    """
    if not isinstance(source, ModelSpec):
        return empirical_measure(source, grid)
    model = source
    if grid is None:
        grid = grid_build(512)
    if model.divisor is None and model.perturbation is None:
        return DensityGrid.uniform(grid)
    if model.n_points != 2:
        raise SamplerError(
            "exact one-point quadrature covers N = 2 and invariant N = 3; "
            "run a chain for this model"
        )
    beta = model.beta if beta is None else float(beta)
    a = beta / model.k
    fine = grid.refined(fine_factor)
    w_fine = model.base.cell_masses(fine)
    if model.perturbation is not None:
        w_fine = w_fine * np.exp(-beta * model.bundle.u_values(fine.centers_xyz))
    s = chordal_sq(grid.centers_xyz[:, None, :], fine.centers_xyz[None, :, :])
    self_cell = fine.bin_points(grid.centers_xyz)
    if a != 0.0:
        with np.errstate(divide="ignore"):
            kernel = np.exp(a * np.log(np.clip(s, 1e-300, None)))
        # the fine cell centered on the output point integrates ch^{2a}
        # exactly: ch^2 from a fixed point is Uniform[0,1] under the round
        # measure, so the cell's mean of s^a is eps^a/(1+a)
        eps = 1.0 / fine.n
        kernel[np.arange(grid.n), self_cell] = eps ** a / (1.0 + a)
    else:
        kernel = np.ones_like(s)
    inner = kernel @ w_fine
    masses = model.base.cell_masses(grid) * inner
    if model.perturbation is not None:
        masses = masses * np.exp(-beta * model.bundle.u_values(grid.centers_xyz))
    return DensityGrid.normalized(grid, masses)


@dataclass(frozen=True)
class CanonicalMetric:
    """Canonical potential log(density/dV) and its curvature cell masses.

    flagged marks floored (effectively empty) cells; total_curvature sums
    the curvature over unflagged cells and should reproduce the bundle
    degree when the density is an honest metric-scale estimate.
    """

    grid: SphereGrid
    potential: np.ndarray
    curvature: np.ndarray
    flagged: np.ndarray
    total_curvature: float
    floor: float


def canonical_potential(one_point: DensityGrid, model: ModelSpec, *,
                        floor: float = 1e-12) -> CanonicalMetric:
    """Potential and curvature of the metric defined by a one-point density.

    potential = log(density / dV) cellwise (the finite-N canonical potential
    up to an additive constant); curvature = reference bundle curvature plus
    the discrete complex Hessian of the potential.  Empty cells are floored
    at `floor`, flagged, and excluded from the curvature-mass total.
    """
    grid = one_point.grid
    ref = model.base.cell_masses(grid)
    flagged = one_point.masses < floor
    phi = np.log(np.maximum(one_point.masses, floor) / ref)
    curv = model.bundle.curvature_masses(grid) + grid.ddc_apply(phi)
    total = float(curv[~flagged].sum())
    return CanonicalMetric(grid, phi, curv, flagged, total, floor)


@dataclass(frozen=True)
class EnergyEstimate:
    """Batch-means estimate of <E^(N)> with its standard error."""

    value: float
    error: float
    n_batches: int
    flag: str = ""


def mean_energy(samples, model: ModelSpec | None = None) -> EnergyEstimate:
    """Batch-means estimate of the mean energy per particle.

    A SampleRun uses its full per-step energy trace split by chain; a raw
    sample array recomputes energies (model required) and batches over the
    sample index.  Fewer than 20 batches widens the error and sets a flag.
    """
    from .energy import energy_per_particle

    if isinstance(samples, SampleRun):
        e = samples.step_energies
        n = samples.chain_length
        chains = [e[i:i + n] for i in range(0, e.size, n)]
        return EnergyEstimate(*_batch_stats(chains))
    xyz = _sample_xyz(samples)
    if model is None:
        raise SamplerError("raw samples need the model to recompute energies")
    energies = np.asarray(energy_per_particle(xyz, model), dtype=float)
    return EnergyEstimate(*_batch_stats([energies]))
