"""Partition quadrature, stability verdicts, and threshold brackets."""

import math

import numpy as np
import pytest

from spheregas.energy import ModelSpec, gram_matrix
from spheregas.geometry import DensityGrid, WeightedDivisor, grid_build
from spheregas.thermo import (
    BetaScan,
    Stratum,
    ThermoError,
    adaptive_integrate,
    analyticity_probe,
    collision_strata,
    free_energy_limit_scan,
    gibbs_threshold,
    partition_quadrature,
    product_free_energy,
    symmetric_family,
    thermo_integration,
    weight_condition,
)

NORTH = (0.0, 0.0, 1.0)
EAST = (1.0, 0.0, 0.0)
WEST = (0.0, 1.0, 0.0)

# (points, weights, margin, stable); degree 2 - sum(w), k chosen so N = 2
WEIGHT_SETS = [
    ((NORTH, EAST, WEST), (0.5, 0.5, 0.5), +0.5, True),
    ((NORTH, EAST, WEST), (0.9, 0.1, 0.1), -0.7, False),
    ((NORTH, EAST, WEST), (0.7, 0.7, 0.5), +0.5, True),
    ((NORTH,), (0.5,), -0.5, False),
]
WEIGHT_IDS = ["w_half3", "w_911", "w_775", "w_single"]


def pair_model(points, weights):
    div = WeightedDivisor(tuple(points), tuple(weights))
    return ModelSpec(k=1.0 / (2.0 - sum(weights)), divisor=div)


def origin_monitor(depth=48):
    return [Stratum("origin", (0,), lambda lo, hi: max(lo[0], 0.0), depth=depth)]


@pytest.fixture(scope="module")
def half_weights_model():
    return pair_model((NORTH, EAST, WEST), (0.5, 0.5, 0.5))


# ------------------------------------------------------- adaptive cubature --

def test_smooth_product_oracle():
    out = adaptive_integrate(
        lambda p: np.cos(p[:, 0]) * np.cos(p[:, 1]),
        [0.0, 0.0], [math.pi / 2.0, math.pi / 2.0],
        rel_tol=1e-10, budget=2000,
    )
    assert out.status == "ok"
    assert math.isclose(out.value, 1.0, rel_tol=1e-9)
    assert abs(out.value - 1.0) <= max(out.error, 1e-12)


@pytest.mark.parametrize("alpha,oracle", [(-0.5, 2.0), (-0.96, 25.0)])
def test_power_law_convergent(alpha, oracle):
    # integrable endpoint singularity: the monitored rings certify
    # convergence and the geometric tail replaces the touching boxes
    out = adaptive_integrate(
        lambda t: np.clip(t[:, 0], 1e-300, None) ** alpha,
        [0.0], [1.0], order=8, seed_splits=3, rel_tol=1e-6, budget=4000,
        monitors=origin_monitor(),
    )
    assert out.status == "ok"
    assert math.isclose(out.value, oracle, rel_tol=2e-3)
    # ring mass of t^alpha scales as 2^{-g(alpha+1)}
    assert out.monitor_ratios["origin"] == pytest.approx(
        2.0 ** -(alpha + 1.0), rel=0.03
    )


@pytest.mark.parametrize("alpha", [-1.0, -1.2])
def test_power_law_divergent(alpha):
    out = adaptive_integrate(
        lambda t: np.clip(t[:, 0], 1e-300, None) ** alpha,
        [0.0], [1.0], order=8, seed_splits=3, rel_tol=1e-6, budget=4000,
        monitors=origin_monitor(),
    )
    assert out.status == "divergent"
    assert out.stratum == "origin"


# ---------------------------------------------------- invariant reductions --

@pytest.mark.parametrize("beta", [1.0, 2.5, -0.5, -0.97])
def test_pair_partition_beta_curve(beta):
    # round pair: ch^2 of a uniform pair is Uniform[0,1], so Z = 1/(1+beta)
    res = partition_quadrature(ModelSpec(k=1.0, degree=1.0), beta)
    assert res.status == "ok" and res.method == "quadrature"
    assert res.n_points == 2
    assert math.isclose(res.z, 1.0 / (1.0 + beta), rel_tol=1e-6)


def test_pair_partition_near_critical_value():
    res = partition_quadrature(ModelSpec(k=1.0, degree=1.0), -0.97)
    assert math.isclose(res.z, 100.0 / 3.0, rel_tol=1e-6)


def test_pair_partition_critical_divergent():
    res = partition_quadrature(ModelSpec(k=1.0, degree=1.0), -1.0)
    assert res.status == "divergent"
    assert res.z == math.inf and res.z_error == math.inf
    assert res.stratum == "collision x1=x2"


def test_beta_zero_is_exact():
    res = partition_quadrature(ModelSpec(k=1.0, degree=1.0), 0.0)
    assert (res.log_z, res.log_z_error, res.status) == (0.0, 0.0, "ok")


def test_default_beta_comes_from_model():
    res = partition_quadrature(ModelSpec(k=1.0, degree=1.0, beta=2.0))
    assert res.beta == 2.0
    assert math.isclose(res.z, 1.0 / 3.0, rel_tol=1e-8)


def test_triple_partition_same_value_both_parameterizations():
    # beta/k = 1 in both models, so Z_3 is the same Slater-square integral
    r1 = partition_quadrature(ModelSpec(k=1.0), 1.0)
    r2 = partition_quadrature(ModelSpec(k=2.0, degree=1.0), 2.0)
    assert r1.n_points == 3 and r2.n_points == 3
    assert math.isclose(r1.z, 1.0 / 9.0, rel_tol=1e-10)
    assert math.isclose(r2.z, 1.0 / 9.0, rel_tol=1e-10)


def test_point_count_guards():
    with pytest.raises(ThermoError):
        partition_quadrature(ModelSpec(k=1.0, degree=3.0), 1.0)   # N = 4
    res = partition_quadrature(ModelSpec(k=1.0), -0.5)
    assert res.status == "inconclusive" and math.isnan(res.log_z)
    triple = ModelSpec(k=4.0 / 3.0, divisor=WeightedDivisor((NORTH,), (0.5,)))
    assert triple.n_points == 3
    assert partition_quadrature(triple, 1.0).status == "inconclusive"


# ------------------------------------------- rotated-frame pair quadrature --

def test_general_path_reproduces_invariant_values():
    # a zero perturbation forces the 4-d path; values must match the 1-d ones
    flat = ModelSpec(k=1.0, degree=1.0,
                     perturbation=lambda x: np.zeros(x.shape[0]))
    r = partition_quadrature(flat, 1.0)
    assert r.status == "ok"
    assert math.isclose(r.z, 0.5, rel_tol=1e-6)
    r = partition_quadrature(flat, -0.5)
    assert r.status == "ok"
    assert math.isclose(r.z, 2.0, rel_tol=2e-3)


def test_constant_perturbation_scales_by_exponential():
    shifted = ModelSpec(k=1.0, degree=1.0,
                        perturbation=lambda x: np.full(x.shape[0], 0.3))
    r = partition_quadrature(shifted, 1.0)
    assert math.isclose(r.z, math.exp(-0.6) * 0.5, rel_tol=1e-6)


def test_dipole_closed_form_and_budget_consistency():
    # u = c*x3 at beta = k: the azimuth integrates out of ch^2 exactly,
    # leaving Z = (A^2 - B^2)/2 with A, B the first two exp moments of u
    c = 0.3
    dip = ModelSpec(k=1.0, degree=1.0, perturbation=lambda x: c * x[..., 2])
    A = math.sinh(c) / c
    B = (math.sinh(c) - c * math.cosh(c)) / c**2
    oracle = 0.5 * (A * A - B * B)
    r1 = partition_quadrature(dip, 1.0)
    assert r1.status == "ok"
    assert math.isclose(r1.z, oracle, rel_tol=1e-4)
    r2 = partition_quadrature(dip, 1.0, budget=36_000)
    assert abs(r1.z - r2.z) <= r1.z_error + r2.z_error


def test_general_path_critical_divergence():
    flat = ModelSpec(k=1.0, degree=1.0,
                     perturbation=lambda x: np.zeros(x.shape[0]))
    r = partition_quadrature(flat, -1.0)
    assert r.status == "divergent"
    assert r.stratum == "collision x1=x2"


def test_divisor_partition_matches_gram_identity(half_weights_model):
    # E_iid |det S|^2 = 2 det(Gram) for a pair, an independent route to
    # Z_{2,k}; the w = 1/2 poles cap quadrature at verdict-grade accuracy,
    # so agreement is graded in error-bar units
    oracle = 2.0 * math.exp(gram_matrix(half_weights_model).log_det)
    res = partition_quadrature(half_weights_model, half_weights_model.k)
    assert res.status == "ok"
    assert abs(res.z - oracle) < 3.0 * res.z_error


# ------------------------------------------------------ stability verdicts --

@pytest.mark.parametrize("points,weights,margin,stable", WEIGHT_SETS,
                         ids=WEIGHT_IDS)
def test_weight_condition_margins(points, weights, margin, stable):
    verdict = weight_condition(WeightedDivisor(tuple(points), tuple(weights)))
    assert math.isclose(verdict.margin, margin, rel_tol=1e-12)
    assert verdict.stable is stable
    assert len(verdict.per_point) == len(weights)
    assert math.isclose(min(verdict.per_point), verdict.margin, rel_tol=1e-12)


def test_collision_strata_round_models():
    pair = collision_strata(ModelSpec(k=1.0, degree=1.0))
    assert pair == (("2 particles at a generic point", 1.0),)
    triple = collision_strata(ModelSpec(k=1.0))
    assert [g for _, g in triple] == pytest.approx([2.0 / 3.0, 1.0])
    assert triple[0][0] == "3 particles at a generic point"
    with pytest.raises(ThermoError):
        collision_strata(ModelSpec(k=1.0), n_points=1)


@pytest.mark.parametrize(
    "points,weights,gamma2",
    [(p, w, g) for (p, w, _, _), g in
     zip(WEIGHT_SETS, [2.0, 2.0 / 9.0, 6.0, 2.0 / 3.0])],
    ids=WEIGHT_IDS,
)
def test_collision_strata_divisor_oracles(points, weights, gamma2):
    model = pair_model(points, weights)
    strata = collision_strata(model)
    assert strata[0][1] == pytest.approx(gamma2, rel=1e-12)
    # binding stratum is the heaviest divisor point unless the generic
    # collision ties it
    if max(weights) > 0.5:
        assert f"w={max(weights)}" in strata[0][0]


@pytest.mark.parametrize("points,weights,margin,stable", WEIGHT_SETS,
                         ids=WEIGHT_IDS)
def test_weight_sets_quadrature_agreement(points, weights, margin, stable):
    # the three stability criteria must agree: weight margin, stratum
    # exponents, and the beta = -1 quadrature verdict
    model = pair_model(points, weights)
    assert model.n_points == 2
    verdict = weight_condition(model.divisor)
    oracle_stable = collision_strata(model)[0][1] > 1.0
    res = partition_quadrature(model, -1.0)
    assert res.status in ("ok", "divergent")
    assert verdict.stable is stable
    assert oracle_stable is stable
    assert (res.status == "ok") is stable
    if not stable:
        # the blamed locus is a collision at the heaviest divisor point
        assert "divisor point" in res.stratum
        assert f"w={max(weights)}" in res.stratum


# ------------------------------------------------------ threshold brackets --

def test_threshold_bracket_round_pair():
    rep = gibbs_threshold(ModelSpec(k=1.0, degree=1.0), bisect_steps=2)
    assert rep.gamma_oracle == pytest.approx(1.0)
    lo, hi = rep.bracket
    assert lo < rep.gamma_oracle <= hi
    assert hi - lo <= 0.25
    assert all(s in ("ok", "divergent") for _, s in rep.probes)


def test_threshold_bracket_half_weights(half_weights_model):
    rep = gibbs_threshold(half_weights_model, bisect_steps=1)
    assert rep.gamma_oracle == pytest.approx(2.0)
    assert rep.stable
    lo, hi = rep.bracket
    assert lo < rep.gamma_oracle <= hi


def test_threshold_oracle_only_beyond_pairs():
    rep = gibbs_threshold(ModelSpec(k=1.0))
    assert rep.n_points == 3
    assert rep.gamma_oracle == pytest.approx(2.0 / 3.0)
    assert rep.bracket is None
    assert not rep.stable
    assert "N = 2" in rep.note
    # same restriction when overriding the point count on a pair model
    rep = gibbs_threshold(ModelSpec(k=1.0, degree=1.0), n_points=3)
    assert rep.bracket is None
    assert rep.gamma_oracle == pytest.approx(2.0 / 3.0)


# ---- thermodynamic integration ----------------------------------------------

FS2 = ModelSpec(k=1.0, degree=1.0)


def test_integration_at_beta_zero_is_exact():
    res = thermo_integration(FS2, 0.0)
    assert res.log_z == 0.0 and res.log_z_error == 0.0
    assert res.method == "thermo-integration"


def test_integration_matches_quadrature():
    beta = 1.0
    q = partition_quadrature(FS2, beta)
    ti = thermo_integration(FS2, beta, seed=3)
    sigma = math.hypot(q.log_z_error, ti.log_z_error)
    assert abs(ti.log_z - q.log_z) < 3.0 * sigma
    assert abs(ti.log_z - q.log_z) < 0.01 * abs(q.log_z)


def test_integration_negative_beta_inside_threshold():
    q = partition_quadrature(FS2, -0.5)
    ti = thermo_integration(FS2, -0.5, seed=3)
    assert abs(ti.log_z - q.log_z) < 3.0 * math.hypot(q.log_z_error,
                                                      ti.log_z_error)
    with pytest.raises(ThermoError, match="threshold"):
        thermo_integration(FS2, -1.0)


def test_integration_rejects_bad_grids():
    with pytest.raises(ThermoError, match="panel"):
        thermo_integration(FS2, 1.0, beta_grid=[0.0, 1 / 3, 2 / 3, 1.0])
    with pytest.raises(ThermoError, match="from 0"):
        thermo_integration(FS2, 1.0, beta_grid=[0.25, 0.5, 1.0])
    with pytest.raises(ThermoError, match="uniform"):
        thermo_integration(FS2, 1.0, beta_grid=[0.0, 0.3, 0.5, 0.8, 1.0])


def test_variance_identity():
    # d^2/dbeta^2 log Z = N^2 Var(E); left side from exact quadrature,
    # right side from one chain at the center point
    from spheregas.sampler import ChainConfig, run_chain

    h = 0.1
    lz = [partition_quadrature(FS2, b).log_z for b in (1 - h, 1.0, 1 + h)]
    d2 = (lz[0] - 2 * lz[1] + lz[2]) / h**2
    assert d2 >= 0.0
    run = run_chain(ChainConfig(FS2, steps=60_000, burn_in=4_000,
                                seed=6, chains=2), beta=1.0)
    assert abs(4.0 * float(run.step_energies.var()) - d2) < 0.02


# ---- free-energy scans -------------------------------------------------------

def test_symmetric_family_point_counts():
    fam = symmetric_family(1.0, [2, 3, 8])
    assert [m.n_points for m in fam] == [2, 3, 8]
    assert [m.k for m in fam] == [1.0, 2.0, 7.0]
    fam = symmetric_family(2.0, [3, 5])
    assert [m.n_points for m in fam] == [3, 5]


def test_scan_applies_the_orthonormal_shift_and_gap_shrinks():
    fam = symmetric_family(1.0, [2, 3])
    scan = free_energy_limit_scan(fam, [0.5, 1.0], inf_f=[0.0, 0.0])
    for model in fam:
        n = model.n_points
        for j, beta in enumerate(scan.betas):
            q = partition_quadrature(model, beta)
            want = -(q.log_z - (beta / model.k) * gram_matrix(model).log_det) / n
            assert scan.f[n][j] == pytest.approx(want, abs=1e-9)
    # the distance to the limit shrinks from N=2 to N=3 at each beta
    assert (np.abs(scan.gap(3)) < np.abs(scan.gap(2))).all()
    assert scan.notes == ()


def test_scan_notes_a_growing_gap():
    fam = symmetric_family(1.0, [3, 2])      # deliberately misordered
    scan = free_energy_limit_scan(fam, [1.0], inf_f=[0.0])
    assert any("gap grows" in note for note in scan.notes)


def test_scan_csv_round_trip(tmp_path):
    fam = symmetric_family(1.0, [2, 3])
    scan = free_energy_limit_scan(fam, [0.5, 1.0], inf_f=[0.0, 0.0])
    path = tmp_path / "scan.csv"
    scan.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "beta,N,f_N,err,infF,gap"
    back = BetaScan.from_csv(path)
    assert back.n_values == scan.n_values
    assert np.allclose(back.betas, scan.betas)
    for n in scan.n_values:
        assert np.allclose(back.f[n], scan.f[n])
        assert np.allclose(back.err[n], scan.err[n])
    assert np.allclose(back.inf_f, scan.inf_f)


def test_scan_input_guards():
    fam = symmetric_family(1.0, [2])
    with pytest.raises(ThermoError, match="increasing"):
        free_energy_limit_scan(fam, [1.0, 0.5], inf_f=[0.0, 0.0])
    with pytest.raises(ThermoError, match="inf_f"):
        free_energy_limit_scan(fam, [0.5, 1.0], inf_f=[0.0])
    with pytest.raises(ThermoError, match="no models"):
        free_energy_limit_scan([], [1.0], inf_f=[0.0])


# ---- analyticity probe -------------------------------------------------------

def _scan_of(betas, values, errors=None):
    e = np.zeros_like(values) if errors is None else errors
    return BetaScan(betas, (3,), {3: values}, {3: e}, np.zeros_like(values))


PROBE_BETAS = np.linspace(0.2, 2.0, 25)


def test_probe_passes_smooth_scans():
    smooth = -np.log1p(PROBE_BETAS) / 2
    assert not analyticity_probe(_scan_of(PROBE_BETAS, smooth)).flagged
    rng = np.random.default_rng(2)
    errs = np.full_like(PROBE_BETAS, 2e-3)
    noisy = smooth + rng.normal(0.0, 2e-3, len(PROBE_BETAS))
    assert not analyticity_probe(_scan_of(PROBE_BETAS, noisy, errs)).flagged


def test_probe_flags_a_kink_near_its_location():
    kink = 0.3 * np.abs(PROBE_BETAS - 1.0) - 0.2
    rep = analyticity_probe(_scan_of(PROBE_BETAS, kink))
    assert rep.flagged
    assert abs(rep.beta_d1 - 1.0) < 0.3      # window-resolution localization
    assert any("non-analyticity" in f for f in rep.flags)
    rng = np.random.default_rng(3)
    errs = np.full_like(PROBE_BETAS, 2e-3)
    noisy = kink + rng.normal(0.0, 2e-3, len(PROBE_BETAS))
    assert analyticity_probe(_scan_of(PROBE_BETAS, noisy, errs)).flagged


def test_probe_guards():
    smooth = -np.log1p(PROBE_BETAS) / 2
    with pytest.raises(ThermoError, match="20"):
        analyticity_probe(_scan_of(PROBE_BETAS[:10], smooth[:10]))
    with pytest.raises(ThermoError, match="column"):
        analyticity_probe(_scan_of(PROBE_BETAS, smooth), n=5)
    with pytest.raises(ThermoError, match="window"):
        analyticity_probe(_scan_of(PROBE_BETAS, smooth), window=3)


# ---- product-measure bound ---------------------------------------------------

def test_product_bound_at_the_uniform_measure():
    g = grid_build(512)
    sigma = DensityGrid.uniform(g)
    for beta in (0.5, 1.0, 2.0):
        F = product_free_energy(sigma, FS2, beta)
        assert F == pytest.approx(beta, abs=5e-3 * beta)
        assert -partition_quadrature(FS2, beta).log_z <= F


def test_product_bound_dominates_minus_log_z():
    g = grid_build(512)
    x = g.centers_xyz
    rng = np.random.default_rng(0)
    neg_log_z = math.log(2.0)                # -log Z_{2,1}
    for _ in range(5):
        nu = DensityGrid.normalized(g, np.exp(x @ (rng.normal(size=3) * 0.8)))
        assert product_free_energy(nu, FS2, 1.0) > neg_log_z


def test_product_bound_needs_two_points():
    g = grid_build(128)
    with pytest.raises(ThermoError, match="N >= 2"):
        product_free_energy(DensityGrid.uniform(g), FS2, 1.0, n_points=1)
