"""Slater energies, Gibbs densities, and Gram matrices."""

import itertools
import math

import numpy as np
import pytest
from scipy.integrate import quad

from spheregas.energy import (
    Configuration,
    EnergyError,
    ModelSpec,
    SectionBasis,
    basis_change,
    energy_per_particle,
    fs_gram_diagonal,
    gibbs_log_density,
    gram_matrix,
    orthonormalize_basis,
    pair_log_chordal,
    slater_log_norm,
    vandermonde_log_sq,
)
from spheregas.geometry import (
    SphereGrid,
    SpherePoint,
    WeightedDivisor,
    rotation_matrix,
    uniform_sphere,
    xyz_from_chart,
)

LOG2 = math.log(2.0)
LOGPI = math.log(math.pi)


def chart0_xyz(coords):
    return np.array([xyz_from_chart(0, c) for c in coords])


def direct_slater_log_sq(coords, k, degree, u=None, basis=None):
    """log|det S|^2 straight from the determinant of weighted monomials."""
    z = np.asarray(coords, dtype=complex)
    n = int(round(k * degree))
    S = np.vander(z, n + 1, increasing=True).T.astype(complex)
    S = S * (1.0 + np.abs(z) ** 2) ** (-n / 2.0)
    if u is not None:
        S = S * np.exp(-0.5 * k * u(chart0_xyz(z)))
    if basis is not None:
        S = basis.matrix @ S
    sign, logdet = np.linalg.slogdet(S)
    return 2.0 * float(logdet)


@pytest.fixture(scope="module")
def half_weights_divisor():
    pts = [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)]
    return WeightedDivisor(tuple(pts), (0.5, 0.5, 0.5))


# ------------------------------------------------------------- vandermonde --

def test_vandermonde_pair_is_zero():
    assert vandermonde_log_sq([0.0, 1.0]) == 0.0


def test_vandermonde_three_points():
    oracle = math.log(abs((0 - 1) * (0 - 2) * (1 - 2)) ** 2)
    assert math.isclose(vandermonde_log_sq([0.0, 1.0, 2.0]), oracle, rel_tol=1e-14)
    assert math.isclose(oracle, math.log(4.0), rel_tol=1e-15)


def test_vandermonde_coincident_pair_is_minus_inf():
    assert vandermonde_log_sq([0.5, 0.5]) == -math.inf
    cfg = Configuration.from_chart_coords([0.5, 0.5, 2.0])
    assert vandermonde_log_sq(cfg) == -math.inf


def test_vandermonde_configuration_matches_raw():
    rng = np.random.default_rng(11)
    z = rng.normal(size=6) * 2.0 + 1j * rng.normal(size=6) * 2.0
    cfg = Configuration.from_chart_coords(z)
    assert math.isclose(
        vandermonde_log_sq(cfg), vandermonde_log_sq(z), rel_tol=1e-11
    )


def test_vandermonde_far_points_need_no_chart_zero():
    # z = 1e200 is representable only through the second chart; the pair
    # rewrite must keep every term finite
    cfg = Configuration((SpherePoint(0, 0.0), SpherePoint(0, 1.0), SpherePoint(1, 1e-200)))
    expected = 2.0 * (200 * math.log(10.0)) * 2.0
    assert math.isclose(vandermonde_log_sq(cfg), expected, rel_tol=1e-12)
    at_infinity = Configuration((SpherePoint(1, 0.0), SpherePoint(0, 0.5)))
    assert vandermonde_log_sq(at_infinity) == math.inf
    doubled = Configuration((SpherePoint(1, 0.0), SpherePoint(1, 0.0)))
    assert vandermonde_log_sq(doubled) == -math.inf


# ------------------------------------------------------------------ slater --

def test_slater_worked_pair():
    model = ModelSpec(k=1.0, degree=1.0)
    cfg = Configuration.from_chart_coords([0.0, 1.0])
    assert math.isclose(slater_log_norm(cfg, model), -LOG2, rel_tol=1e-13)
    assert math.isclose(energy_per_particle(cfg, model), LOG2 / 2.0, rel_tol=1e-13)


def test_slater_matches_direct_determinant():
    rng = np.random.default_rng(3)
    model = ModelSpec(k=1.0, degree=3.0)
    z = rng.normal(size=4) + 1j * rng.normal(size=4)
    got = slater_log_norm(chart0_xyz(z), model)
    assert math.isclose(got, direct_slater_log_sq(z, 1.0, 3.0), rel_tol=1e-10)


def test_slater_with_perturbation_matches_direct():
    u = lambda xyz: 0.3 * xyz[..., 2]
    model = ModelSpec(k=1.5, degree=2.0, perturbation=u)
    assert model.n_points == 4
    rng = np.random.default_rng(4)
    z = rng.normal(size=4) + 1j * rng.normal(size=4)
    got = slater_log_norm(chart0_xyz(z), model)
    assert math.isclose(got, direct_slater_log_sq(z, 1.5, 2.0, u=u), rel_tol=1e-10)


def test_slater_basis_shift():
    rng = np.random.default_rng(5)
    model = ModelSpec(k=1.0, degree=3.0)
    M = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    basis = basis_change(None, M, model.section_degree)
    sign, logdet = np.linalg.slogdet(M)
    assert math.isclose(basis.log_shift, 2.0 * logdet, rel_tol=1e-12)
    for _ in range(10):
        z = rng.normal(size=4) + 1j * rng.normal(size=4)
        xyz = chart0_xyz(z)
        shift = slater_log_norm(xyz, model, basis) - slater_log_norm(xyz, model)
        assert math.isclose(shift, basis.log_shift, rel_tol=1e-9)
        assert math.isclose(
            slater_log_norm(xyz, model, basis),
            direct_slater_log_sq(z, 1.0, 3.0, basis=basis),
            rel_tol=1e-9,
        )


def test_basis_change_validates():
    assert basis_change(None, np.eye(3), 2).log_shift == 0.0
    scalar = basis_change(None, 2.5 * np.eye(2), 1)
    assert math.isclose(scalar.log_shift, 4.0 * math.log(2.5), rel_tol=1e-13)
    with pytest.raises(EnergyError):
        basis_change(None, np.zeros((2, 2)), 1)


def test_energy_permutation_invariance():
    rng = np.random.default_rng(6)
    model = ModelSpec(k=1.0, degree=3.0)
    xyz = uniform_sphere(rng, 4)
    ref = energy_per_particle(xyz, model)
    for perm in itertools.permutations(range(4)):
        assert math.isclose(energy_per_particle(xyz[list(perm)], model), ref,
                            rel_tol=1e-12)


def test_energy_rotation_invariance():
    rng = np.random.default_rng(7)
    model = ModelSpec(k=1.0, degree=2.0)
    xyz = uniform_sphere(rng, 3)
    ref = energy_per_particle(xyz, model)
    pole_swap = rotation_matrix([1.0, 0.0, 0.0], math.pi)
    rots = [pole_swap] + [
        rotation_matrix(uniform_sphere(rng, 1)[0], rng.uniform(0, 2 * math.pi))
        for _ in range(5)
    ]
    for R in rots:
        assert abs(energy_per_particle(xyz @ R.T, model) - ref) < 1e-10


def test_energy_coincident_is_infinite():
    model = ModelSpec(k=1.0, degree=1.0)
    cfg = Configuration.from_chart_coords([0.3 + 0.1j, 0.3 + 0.1j])
    assert energy_per_particle(cfg, model) == math.inf


def test_wrong_point_count_raises():
    model = ModelSpec(k=1.0, degree=2.0)
    with pytest.raises(EnergyError):
        slater_log_norm(chart0_xyz([0.0, 1.0]), model)


def test_pair_log_chordal_batched():
    rng = np.random.default_rng(8)
    batch = uniform_sphere(rng, 15).reshape(5, 3, 3)
    got = pair_log_chordal(batch)
    assert got.shape == (5,)
    for c in range(5):
        assert math.isclose(got[c], pair_log_chordal(batch[c]), rel_tol=1e-13)


# ------------------------------------------------------------------- model --

def test_modelspec_defaults_and_counts(half_weights_divisor):
    assert ModelSpec(k=0.5).degree == 2.0
    assert ModelSpec(k=0.5).n_points == 2
    assert ModelSpec(k=1.0, degree=1.0).n_points == 2
    assert ModelSpec(k=1.0).n_points == 3
    log_model = ModelSpec(k=2.0, divisor=half_weights_divisor)
    assert math.isclose(log_model.degree, 0.5)
    assert log_model.n_points == 2
    single = ModelSpec(k=2.0 / 3.0, divisor=WeightedDivisor(((0, 0, 1.0),), (0.5,)))
    assert single.n_points == 2


def test_modelspec_rejects_bad_data(half_weights_divisor):
    with pytest.raises(EnergyError):
        ModelSpec(k=0.0)
    with pytest.raises(EnergyError):
        ModelSpec(k=math.inf)
    with pytest.raises(EnergyError):
        ModelSpec(k=1.0, beta=math.nan)
    with pytest.raises(EnergyError):
        ModelSpec(k=1.0, degree=1.5)      # fractional degree needs a divisor
    with pytest.raises(EnergyError):
        ModelSpec(k=2.0, degree=1.0, divisor=half_weights_divisor)
    with pytest.raises(EnergyError):
        ModelSpec(k=0.4)                  # k * degree = 0.8 not an integer
    with pytest.raises(EnergyError):
        ModelSpec(k=1e-12)                # k * degree rounds to zero sections
    heavy = WeightedDivisor(
        ((0, 0, 1.0), (1.0, 0, 0), (0, 1.0, 0)), (0.9, 0.9, 0.5)
    )
    with pytest.raises(EnergyError):
        ModelSpec(k=1.0, divisor=heavy)


# ------------------------------------------------------------------- gibbs --

def test_gibbs_worked_pair():
    model = ModelSpec(k=1.0, degree=1.0)
    cfg = Configuration.from_chart_coords([0.0, 1.0])
    v = gibbs_log_density(cfg, model)
    assert math.isclose(v.pairwise, -LOG2, rel_tol=1e-13)
    assert v.weight == 0.0
    assert math.isclose(v.base, -LOGPI + (-LOGPI - math.log(4.0)), rel_tol=1e-13)
    assert v.total == v.pairwise + v.weight + v.base


def test_gibbs_beta_zero_drops_determinant():
    model = ModelSpec(k=1.0, degree=1.0)
    coincident = Configuration.from_chart_coords([0.0, 0.0])
    v = gibbs_log_density(coincident, model, beta=0.0)
    assert v.pairwise == 0.0
    assert math.isclose(v.total, -2.0 * LOGPI, rel_tol=1e-13)
    assert gibbs_log_density(coincident, model).total == -math.inf


def test_gibbs_beta_default_and_override():
    model = ModelSpec(k=1.0, degree=1.0, beta=1.0)
    cfg = Configuration.from_chart_coords([0.2, 0.9j])
    v1 = gibbs_log_density(cfg, model)
    v2 = gibbs_log_density(cfg, model, beta=2.0)
    assert math.isclose(v1.total, gibbs_log_density(cfg, model, beta=1.0).total)
    assert math.isclose(v2.pairwise, 2.0 * v1.pairwise, rel_tol=1e-12)


def test_gibbs_batched_matches_single():
    rng = np.random.default_rng(9)
    model = ModelSpec(k=1.0, degree=2.0, beta=1.3)
    batch = uniform_sphere(rng, 15).reshape(5, 3, 3)
    totals = gibbs_log_density(batch, model)
    assert totals.shape == (5,)
    for c in range(5):
        assert math.isclose(totals[c], gibbs_log_density(batch[c], model).total,
                            rel_tol=1e-12)


def test_gibbs_divisor_pole_is_integrable_plus_inf(half_weights_divisor):
    model = ModelSpec(k=2.0, divisor=half_weights_divisor)
    on_pole = Configuration(((0.0, 0.0, 1.0), (0.0, 0.0, -1.0)))
    v = gibbs_log_density(on_pole, model)
    assert v.base == math.inf and v.total == math.inf
    off = Configuration(((0.6, 0.0, 0.8), (0.0, 0.0, -1.0)))
    assert math.isfinite(gibbs_log_density(off, model).total)


# -------------------------------------------------------------------- gram --

def test_fs_gram_diagonal_values():
    np.testing.assert_allclose(fs_gram_diagonal(1), [0.5, 0.5], rtol=1e-14)
    np.testing.assert_allclose(
        fs_gram_diagonal(2), [1 / 3, 1 / 6, 1 / 3], rtol=1e-14
    )
    assert math.isclose(fs_gram_diagonal(5)[2], 1 / 60, rel_tol=1e-13)


def test_gram_diagonal_radial_oracle():
    # the rotation-invariant entries reduce to 1-d integrals in s = ch^2
    n = 3
    for j in range(n + 1):
        val, _ = quad(lambda s: s**j * (1 - s) ** (n - j), 0.0, 1.0)
        assert math.isclose(fs_gram_diagonal(n)[j], val, rel_tol=1e-12)


def test_gram_fast_path_is_exact_diagonal():
    model = ModelSpec(k=1.0, degree=3.0)
    res = gram_matrix(model)
    np.testing.assert_allclose(res.matrix, np.diag(fs_gram_diagonal(3)), atol=1e-15)
    assert math.isclose(res.log_det, float(np.sum(np.log(fs_gram_diagonal(3)))),
                        rel_tol=1e-13)


def test_gram_quadrature_matches_exact_diagonal():
    model = ModelSpec(k=1.0, degree=3.0)
    res = gram_matrix(model, grid=SphereGrid(96, 192))
    diag = np.real(np.diag(res.matrix))
    np.testing.assert_allclose(diag, fs_gram_diagonal(3), atol=2e-5)
    off = res.matrix - np.diag(np.diag(res.matrix))
    assert np.abs(off).max() < 1e-12


def test_gram_perturbed_axisymmetric_oracle():
    u = lambda xyz: 0.3 * xyz[..., 2]
    model = ModelSpec(k=1.0, degree=2.0, perturbation=u)
    res = gram_matrix(model)
    for j in range(3):
        val, _ = quad(
            lambda s: s**j * (1 - s) ** (2 - j) * math.exp(-0.3 * (1 - 2 * s)),
            0.0, 1.0,
        )
        assert math.isclose(np.real(res.matrix[j, j]), val, rel_tol=2e-4)
    off = res.matrix - np.diag(np.diag(res.matrix))
    assert np.abs(off).max() < 1e-12


def test_gram_extra_deformation_equals_model_perturbation():
    u = lambda xyz: 0.2 * xyz[..., 0] - 0.1 * xyz[..., 2]
    grid = SphereGrid(48, 96)
    via_model = gram_matrix(
        ModelSpec(k=1.0, degree=2.0, perturbation=u), grid=grid, check=False
    )
    via_arg = gram_matrix(ModelSpec(k=1.0, degree=2.0), u=u, grid=grid, check=False)
    np.testing.assert_array_equal(via_model.matrix, via_arg.matrix)


def test_gram_rejects_aliasing_grid():
    model = ModelSpec(k=1.0, degree=5.0)
    with pytest.raises(EnergyError):
        gram_matrix(model, grid=SphereGrid(8, 4))


def test_gram_divisor_model_positive_definite(half_weights_divisor):
    model = ModelSpec(k=2.0, divisor=half_weights_divisor)
    grid = SphereGrid(48, 96)
    res = gram_matrix(model, grid=grid, check=False)
    np.testing.assert_allclose(res.matrix, res.matrix.conj().T, atol=1e-14)
    assert np.linalg.eigvalsh(res.matrix).min() > 0.0
    basis = orthonormalize_basis(model, gram=res)
    redone = gram_matrix(model, grid=grid, check=False, basis=basis)
    np.testing.assert_allclose(redone.matrix, np.eye(model.n_points), atol=1e-10)
    assert abs(redone.log_det) < 1e-10


def test_orthonormalize_identities():
    model = ModelSpec(k=1.0, degree=2.0)
    res = gram_matrix(model)
    basis = orthonormalize_basis(model)
    expected = np.diag(1.0 / np.sqrt(fs_gram_diagonal(2)))
    np.testing.assert_allclose(basis.matrix, expected, atol=1e-13)
    assert math.isclose(basis.log_shift, -res.log_det, rel_tol=1e-12)
    T = basis.matrix
    np.testing.assert_allclose(T @ res.matrix @ T.conj().T, np.eye(3), atol=1e-13)
    plain = orthonormalize_basis(model, gram=np.diag([2.0, 8.0]))
    np.testing.assert_allclose(plain.matrix, np.diag([2.0**-0.5, 8.0**-0.5]),
                               atol=1e-14)


def test_orthonormalize_rejects_indefinite():
    model = ModelSpec(k=1.0, degree=1.0)
    with pytest.raises(EnergyError):
        orthonormalize_basis(model, gram=np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_iid_mean_of_slater_norm_matches_gram_determinant():
    # sample mean of |det S|^2 under dV x dV equals N! det(Gram)
    rng = np.random.default_rng(12)
    for degree, draws in ((1.0, 200_000), (2.0, 200_000)):
        model = ModelSpec(k=1.0, degree=degree)
        n = model.n_points
        pts = uniform_sphere(rng, draws * n).reshape(draws, n, 3)
        vals = np.exp(slater_log_norm(pts, model))
        target = math.factorial(n) * float(np.prod(fs_gram_diagonal(n - 1)))
        se = float(vals.std(ddof=1) / math.sqrt(draws))
        assert abs(float(vals.mean()) - target) < 3.0 * se
        # in the orthonormal basis the same mean is exactly N!
        shift = orthonormalize_basis(model).log_shift
        ortho_mean = float(vals.mean()) * math.exp(shift)
        assert abs(ortho_mean - math.factorial(n)) < 3.0 * se * math.exp(shift)


def test_configuration_validation():
    with pytest.raises(EnergyError):
        Configuration((np.array([0.0, 0.0, 1.0]),))
    cfg = Configuration.from_xyz(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
    assert len(cfg) == 2
    np.testing.assert_allclose(cfg.xyz[1], [1.0, 0.0, 0.0])
