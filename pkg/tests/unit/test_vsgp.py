import dataclasses
import json
import math
import time

import numpy as np
import pytest

import vsgp
from gp_exact import ExactGP, log_marginal_likelihood
from grid import EmptyObservationsError, ObservationSet, SpatioTemporalGrid
from kernels import CoregionalizationSpec, KernelFamily, KernelSpec, gram, parameter_names
from kernels import from_vector, to_vector
from vsgp import (
    InducingSet,
    KernelInit,
    TrainedModel,
    VsgpOptions,
    elbo,
    fit,
    fit_pretrained,
    init_inducing,
    inducing_posterior,
    num_inducing,
    predict,
)

GRID = SpatioTemporalGrid(ds=3.0, dt=5.0, S=12, T=12)
FD_STEP = 1e-5
QUICK = VsgpOptions(max_iterations=25)


def make_spec(family=KernelFamily.MATERN52, **update) -> KernelSpec:
    values = dict(
        family=family,
        variance=2.0,
        lengthscale_s=2.0,
        lengthscale_t=1.5,
        angle=0.25,
        noise_variance=0.2,
        shape=1.5,
    )
    values.update(update)
    return KernelSpec(**values)


def random_spec(rng, family=KernelFamily.MATERN52, lanes=0) -> KernelSpec:
    coregionalization = None
    if lanes:
        coregionalization = CoregionalizationSpec.from_matrix(
            rng.uniform(0.5, 1.5, size=(lanes, int(rng.integers(1, lanes + 1))))
        )
    return KernelSpec(
        family=family,
        variance=float(rng.uniform(0.5, 3.0)),
        lengthscale_s=float(rng.uniform(1.0, 4.0)),
        lengthscale_t=float(rng.uniform(1.0, 4.0)),
        angle=float(rng.uniform(-1.3, 1.3)),
        noise_variance=float(rng.uniform(0.1, 1.0)),
        shape=float(rng.uniform(0.5, 3.0)),
        coregionalization=coregionalization,
    )


def smooth_data(rng, n: int, lanes: int = 1, level: float = 10.0) -> ObservationSet:
    X = rng.uniform(0, 12, size=(n, 2))
    lane = rng.integers(1, lanes + 1, size=n)
    y = level + 3 * np.sin(0.4 * X[:, 0] - 0.3 * X[:, 1]) + 0.5 * lane + rng.normal(0, 0.3, n)
    return ObservationSet(X, lane, y)


def lattice(nx: int, ny: int, spacing: float) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return np.column_stack([i.ravel(), j.ravel()]) * spacing + 0.5


def dense_elbo(spec, Z, train) -> float:
    """The collapsed bound written out with explicit inverses."""
    Kmm = gram(spec, Z)
    Kmn = gram(spec, Z, train.X)
    Q = Kmn.T @ np.linalg.inv(Kmm) @ Kmn
    C = Q + spec.noise_variance * np.eye(len(train))
    _, logdet = np.linalg.slogdet(C)
    n = len(train)
    fit_term = -0.5 * (train.y @ np.linalg.inv(C) @ train.y + logdet + n * math.log(2 * math.pi))
    trace = np.trace(gram(spec, train.X) - Q)
    return fit_term - trace / (2 * spec.noise_variance)


@pytest.mark.parametrize("n, m", [(1, 1), (49, 1), (50, 1), (51, 2), (100, 2), (100000, 500)])
def test_num_inducing(n, m):
    assert num_inducing(n) == m


def test_init_inducing_is_seeded_and_inside_the_grid():
    first = init_inducing(GRID, 400, seed=3)
    second = init_inducing(GRID, 400, seed=3)
    other = init_inducing(GRID, 400, seed=4)

    assert len(first) == 8
    np.testing.assert_array_equal(first.Z, second.Z)
    assert not np.array_equal(first.Z, other.Z)
    assert np.all((first.Z >= 0) & (first.Z < [GRID.S, GRID.T]))


def test_init_inducing_physical_units():
    inducing = init_inducing(GRID, 1000, seed=0, physical_units=True)

    assert np.all(inducing.Z < [GRID.S * GRID.ds, GRID.T * GRID.dt])
    assert inducing.Z[:, 1].max() > GRID.T


def test_collapses_to_exact_gp_when_inducing_equals_data():
    """Z = X with m = n: no trace penalty and the ELBO is the exact LML."""
    rng = np.random.default_rng(0)
    spec = make_spec()
    X = lattice(6, 5, 2.0)
    train = ObservationSet(X, np.ones(30, dtype=int), rng.normal(10, 2, size=30))

    result = elbo(spec, InducingSet(X), train, jitter=0.0, with_gradients=False)

    assert result.trace_term == pytest.approx(0.0, abs=1e-6)
    assert result.value == pytest.approx(log_marginal_likelihood(spec, train), abs=1e-6)


def test_collapsed_predictions_match_exact_gp():
    rng = np.random.default_rng(1)
    spec = make_spec()
    X = lattice(6, 5, 2.0)
    train = ObservationSet(X, np.ones(30, dtype=int), rng.normal(10, 2, size=30))
    X_star = rng.uniform(0, 12, size=(25, 2))

    model = fit_pretrained(
        train, spec, inducing=InducingSet(X), options=VsgpOptions(jitter=0.0)
    )
    sparse = predict(model, X_star)
    exact = ExactGP(spec, train).posterior(X_star)

    np.testing.assert_allclose(sparse.mean, exact.mean, atol=1e-6)
    np.testing.assert_allclose(sparse.variance, exact.variance, atol=1e-6)


def test_recovers_observation_at_an_inducing_point():
    spec = make_spec(noise_variance=1e-8)
    X = lattice(3, 3, 3.0)
    train = ObservationSet(X, np.ones(9, dtype=int), np.arange(9, dtype=float))

    model = fit_pretrained(train, spec, inducing=InducingSet(X), options=VsgpOptions(jitter=0.0))

    np.testing.assert_allclose(predict(model, X[4:5]).mean, [4.0], atol=1e-4)


def test_elbo_lower_bounds_the_exact_lml():
    """Over randomised specs, inducing sets and data the bound never exceeds the LML."""
    rng = np.random.default_rng(2)
    families = list(KernelFamily)
    for draw in range(200):
        spec = random_spec(rng, families[draw % len(families)])
        n = int(rng.integers(1, 61))
        train = smooth_data(rng, n)
        Z = rng.uniform(-2, 14, size=(int(rng.integers(1, 11)), 2))

        result = elbo(spec, InducingSet(Z), train, with_gradients=False)

        assert result.trace_term <= 0.0
        assert result.value <= log_marginal_likelihood(spec, train) + 1e-6


def test_elbo_matches_dense_formula():
    rng = np.random.default_rng(3)
    spec = make_spec()
    train = smooth_data(rng, 30)
    Z = lattice(5, 1, 2.4)

    result = elbo(spec, InducingSet(Z), train, jitter=0.0, with_gradients=False)

    assert result.value == pytest.approx(dense_elbo(spec, Z, train), rel=1e-8)


def _elbo_value(spec, Z, train, lanes):
    return elbo(spec, InducingSet(Z, lanes), train, with_gradients=False).value


@pytest.mark.parametrize("family", list(KernelFamily))
def test_elbo_gradients_match_finite_differences(family):
    """Hyperparameter, angle, noise, Z and A gradients against central differences."""
    rng = np.random.default_rng(4)
    for draw in range(25):
        lanes_count = 2 if draw % 3 == 0 else 0
        spec = random_spec(rng, family, lanes=lanes_count)
        train = smooth_data(rng, 20, lanes=max(lanes_count, 1), level=0.0)
        m = 4
        Z = rng.uniform(0, 12, size=(m, 2))
        lanes = np.arange(m) % lanes_count + 1 if lanes_count else None

        result = elbo(spec, InducingSet(Z, lanes), train)

        vector = to_vector(spec)
        for k, name in enumerate(parameter_names(spec)):
            plus, minus = vector.copy(), vector.copy()
            plus[k] += FD_STEP
            minus[k] -= FD_STEP
            expected = (
                _elbo_value(from_vector(spec, plus), Z, train, lanes)
                - _elbo_value(from_vector(spec, minus), Z, train, lanes)
            ) / (2 * FD_STEP)
            assert result.gradients[name] == pytest.approx(expected, rel=1e-4, abs=1e-5), name
        for i in range(m):
            for d in range(2):
                plus, minus = Z.copy(), Z.copy()
                plus[i, d] += FD_STEP
                minus[i, d] -= FD_STEP
                expected = (
                    _elbo_value(spec, plus, train, lanes) - _elbo_value(spec, minus, train, lanes)
                ) / (2 * FD_STEP)
                assert result.inducing_gradient[i, d] == pytest.approx(
                    expected, rel=1e-4, abs=1e-5
                )


def test_inducing_posterior_matches_literal_formulas():
    """The stable path agrees with the formulas written with explicit inverses."""
    rng = np.random.default_rng(5)
    spec = make_spec()
    train = smooth_data(rng, 30)
    Z = lattice(5, 1, 2.4)
    s = spec.noise_variance

    mean_u, precision, _ = inducing_posterior(spec, InducingSet(Z), train, jitter=0.0)

    Kmm = gram(spec, Z)
    Kmn = gram(spec, Z, train.X)
    Kmm_inv = np.linalg.inv(Kmm)
    Lambda = Kmm_inv @ (Kmm + Kmn @ Kmn.T / s) @ Kmm_inv
    expected_mean = np.linalg.inv(Lambda) @ Kmm_inv @ Kmn @ train.y / s
    np.testing.assert_allclose(precision, Lambda, rtol=1e-8, atol=1e-8 * np.abs(Lambda).max())
    np.testing.assert_allclose(
        mean_u, expected_mean, rtol=1e-8, atol=1e-8 * np.abs(expected_mean).max()
    )

    model = fit_pretrained(train, spec, inducing=InducingSet(Z), options=VsgpOptions(jitter=0.0))
    X_star = rng.uniform(0, 12, size=(10, 2))
    Kms = gram(spec, Z, X_star)
    mean = Kms.T @ Kmm_inv @ mean_u
    covariance = (
        gram(spec, X_star)
        - Kms.T @ Kmm_inv @ Kms
        + Kms.T @ Kmm_inv @ np.linalg.inv(Lambda) @ Kmm_inv @ Kms
    )
    result = predict(model, X_star)
    np.testing.assert_allclose(result.mean, mean, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(result.covariance, covariance, rtol=1e-6, atol=1e-8)


def test_predict_diagonal_only_above_cap():
    rng = np.random.default_rng(6)
    train = smooth_data(rng, 30)
    inducing = InducingSet(lattice(3, 2, 4.0))
    options = VsgpOptions(covariance_cap=5, chunk_size=3)
    model = fit_pretrained(train, make_spec(), inducing=inducing, options=options)
    X_star = rng.uniform(0, 12, size=(11, 2))

    capped = predict(model, X_star)
    full = predict(dataclasses.replace(model, covariance_cap=100), X_star)

    assert capped.covariance is None
    assert full.covariance is not None
    np.testing.assert_allclose(capped.mean, full.mean, rtol=1e-12)
    np.testing.assert_allclose(capped.variance, full.variance, rtol=1e-10, atol=1e-12)
    assert np.all(capped.variance >= 0)


def test_predict_warns_when_extrapolating(caplog):
    rng = np.random.default_rng(7)
    train = smooth_data(rng, 20)
    model = fit_pretrained(train, make_spec(), grid=GRID, seed=0)

    predict(model, np.array([[-5.0, 3.0]]))

    assert "Extrapolating" in caplog.text


def test_predict_mean_invariant_under_permutation():
    rng = np.random.default_rng(8)
    train = smooth_data(rng, 40)
    order = rng.permutation(40)
    permuted = ObservationSet(train.X[order], train.lane[order], train.y[order])
    inducing = InducingSet(lattice(3, 3, 4.0))
    X_star = rng.uniform(0, 12, size=(15, 2))

    first = predict(fit_pretrained(train, make_spec(), inducing=inducing), X_star)
    second = predict(fit_pretrained(permuted, make_spec(), inducing=inducing), X_star)

    np.testing.assert_allclose(first.mean, second.mean, rtol=1e-10, atol=1e-10)


def test_fit_never_lowers_the_elbo():
    rng = np.random.default_rng(9)
    train = smooth_data(rng, 60)

    model = fit(train, GRID, QUICK, seed=1)

    trace = model.metadata.trace
    assert model.metadata.final_elbo >= model.metadata.initial_elbo
    assert all(b >= a for a, b in zip(trace, trace[1:]))
    assert model.metadata.iterations <= QUICK.max_iterations
    assert model.metadata.num_data == 60
    assert model.metadata.data_digest == train.digest()
    assert -math.pi / 2 < model.spec.angle <= math.pi / 2


def test_fit_with_lbfgs_never_lowers_the_elbo():
    rng = np.random.default_rng(10)
    train = smooth_data(rng, 60)

    model = fit(train, GRID, VsgpOptions(optimizer="lbfgs", max_iterations=15), seed=1)

    assert model.metadata.optimizer == "lbfgs"
    assert model.metadata.final_elbo >= model.metadata.initial_elbo


def test_fit_is_deterministic():
    rng = np.random.default_rng(11)
    train = smooth_data(rng, 50)

    first = fit(train, GRID, QUICK, seed=5)
    second = fit(train, GRID, QUICK, seed=5)

    assert json.dumps(first.to_dict()) == json.dumps(second.to_dict())


def test_fit_respects_fixed_angle():
    rng = np.random.default_rng(12)
    train = smooth_data(rng, 50)
    options = QUICK.model_copy(update={"optimize_angle": False})

    model = fit(train, GRID, options, KernelInit(angle=0.0), seed=0)

    assert model.spec.angle == 0.0


def test_fit_default_initialisation():
    """Unset init values come from the data and the grid."""
    rng = np.random.default_rng(13)
    train = smooth_data(rng, 50, level=20.0)

    spec = KernelInit().resolve(GRID, train.y)

    assert spec.variance == pytest.approx(np.var(train.y))
    assert spec.variance < 0.1 * np.mean(train.y**2)
    assert spec.lengthscale_s == GRID.S / 10
    assert spec.lengthscale_t == GRID.T / 10
    assert spec.noise_variance == pytest.approx(0.1 * spec.variance)
    assert spec.angle == 0.0
    assert spec.family is KernelFamily.MATERN52


def test_fit_aborts_on_non_finite_elbo(mocker):
    rng = np.random.default_rng(14)
    train = smooth_data(rng, 30)
    real_elbo = vsgp.elbo
    calls = {"count": 0}

    def flaky(*args, **kwargs):
        calls["count"] += 1
        result = real_elbo(*args, **kwargs)
        if calls["count"] == 3:
            return result._replace(value=math.nan)
        return result

    mocker.patch.object(vsgp, "elbo", side_effect=flaky)

    model = fit(train, GRID, QUICK, seed=0)

    assert model.metadata.termination == "aborted"
    assert "non-finite" in model.metadata.diagnostic
    assert math.isfinite(model.metadata.final_elbo)
    assert model.metadata.final_elbo >= model.metadata.initial_elbo


def test_fit_requires_data():
    with pytest.raises(EmptyObservationsError):
        fit(ObservationSet(np.zeros((0, 2)), [], []), GRID)


def test_fit_warns_with_more_inducing_points_than_data(caplog):
    rng = np.random.default_rng(15)
    train = smooth_data(rng, 3)

    fit(train, GRID, VsgpOptions(max_iterations=2), inducing=InducingSet(lattice(2, 2, 3.0)))

    assert caplog.text.count("inducing points for only 3 observations") == 1


def test_elbo_warns_with_more_inducing_points_than_data(caplog):
    rng = np.random.default_rng(16)
    train = smooth_data(rng, 3)

    elbo(make_spec(), InducingSet(lattice(2, 2, 3.0)), train, with_gradients=False)

    assert "4 inducing points for only 3 observations" in caplog.text


def test_fit_pretrained_reproduces_the_fitted_model():
    rng = np.random.default_rng(16)
    train = smooth_data(rng, 60)
    fitted = fit(train, GRID, QUICK, seed=2)
    X_star = GRID.cell_centers()

    pretrained = fit_pretrained(train, fitted.spec, inducing=fitted.inducing, grid=GRID)

    assert pretrained.metadata.iterations == 0
    assert pretrained.metadata.termination == "pretrained"
    np.testing.assert_allclose(
        predict(pretrained, X_star).mean, predict(fitted, X_star).mean, rtol=1e-10, atol=1e-10
    )


def test_fit_pretrained_is_faster_than_fit():
    rng = np.random.default_rng(19)
    train = smooth_data(rng, 200)
    inducing = InducingSet(rng.uniform(0, 12, size=(20, 2)))

    start = time.perf_counter()
    fitted = fit(train, GRID, QUICK, seed=0, inducing=inducing)
    fit_seconds = time.perf_counter() - start
    start = time.perf_counter()
    fit_pretrained(train, fitted.spec, inducing=inducing, grid=GRID)
    pretrained_seconds = time.perf_counter() - start

    assert pretrained_seconds < fit_seconds


def test_fit_pretrained_with_a_single_inducing_point():
    rng = np.random.default_rng(17)
    train = smooth_data(rng, 10)

    model = fit_pretrained(train, make_spec(), seed=0, grid=GRID)

    assert len(model.inducing) == 1
    assert np.all(np.isfinite(predict(model, GRID.cell_centers()).mean))


def test_model_round_trip_is_bit_faithful(tmp_path):
    rng = np.random.default_rng(18)
    train = smooth_data(rng, 40)
    model = fit(train, GRID, QUICK, seed=3)
    X_star = rng.uniform(0, 12, size=(7, 2))

    loaded = TrainedModel.load(model.save(tmp_path / "model.json"))

    assert loaded.spec == model.spec
    np.testing.assert_array_equal(loaded.inducing.Z, model.inducing.Z)
    np.testing.assert_array_equal(loaded.mean_u, model.mean_u)
    np.testing.assert_array_equal(loaded.precision, model.precision)
    assert loaded.metadata == model.metadata
    np.testing.assert_array_equal(predict(loaded, X_star).mean, predict(model, X_star).mean)


def test_model_load_rejects_unknown_format():
    with pytest.raises(ValueError):
        TrainedModel.from_dict({"format": 99})
