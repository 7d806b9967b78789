import numpy as np
import pytest

from factories import chain_network, feeder, make_fleet
from safeflex.grid import InjectionProfile, solve_power_flow
from safeflex.regressor import (
    FeatureSpec,
    LinearVoltageModel,
    RegressionDataset,
    action_affine_map,
    cross_validate,
    fit,
    generate_dataset,
    r2_scores,
)


def affine_dataset(n_rows=200, n_bus=3, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    spec = FeatureSpec(n_bus)
    x = rng.normal(50.0, 20.0, size=(n_rows, spec.n_features))
    coef = rng.normal(size=(spec.n_features, 2)) * 1e-3
    y = x @ coef + np.array([1.0, 0.98]) + noise * rng.normal(size=(n_rows, 2))
    return RegressionDataset(x, y, spec, seed), coef


def feeder_rows(net, fleet):
    rows = np.stack([net.nominal_p_kw * s for s in (0.6, 0.8, 1.0)])
    rows[:, fleet.buses] = 60.0
    return rows


def feeder_dataset(n=400, seed=1):
    net, fleet = feeder()
    rows = feeder_rows(net, fleet)
    return net, fleet, generate_dataset(net, fleet, rows, 0.5 * rows, n, seed)


def feeder_base(net, fleet):
    p = feeder_rows(net, fleet)[1]
    return InjectionProfile(p, 0.5 * p)


def test_affine_ground_truth_is_recovered():
    ds, coef = affine_dataset()
    model = fit(ds, ridge_lambda=0.0)
    np.testing.assert_allclose(model.coef, coef.T, atol=1e-10)
    np.testing.assert_allclose(model.raw_intercept, [1.0, 0.98], atol=1e-10)


def test_duplicated_rows_give_the_same_fit():
    ds, _ = affine_dataset(noise=1e-3)
    twice = RegressionDataset(np.vstack([ds.features] * 2), np.vstack([ds.targets] * 2), ds.spec)
    a, b = fit(ds, 1e-3), fit(twice, 1e-3)
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-9, atol=1e-14)


def test_cross_validation_on_affine_truth():
    ds, _ = affine_dataset()
    rep = cross_validate(ds, k=5, ridge_lambda=0.0)
    assert max(rep.mae_pu) < 1e-10
    assert min(rep.r2) > 1 - 1e-12
    assert rep.degenerate_outputs == []


def test_constant_target_is_flagged():
    ds, _ = affine_dataset()
    ds.targets[:, 1] = 1.0
    rep = cross_validate(ds, k=4)
    assert rep.degenerate_outputs == [1]
    r2, deg = r2_scores(ds.targets, ds.targets)
    assert np.isnan(r2[1]) and deg.tolist() == [False, True]


def test_cross_validation_arguments():
    ds, _ = affine_dataset(n_rows=3)
    with pytest.raises(ValueError):
        cross_validate(ds, k=1)
    with pytest.raises(ValueError):
        cross_validate(ds, k=5)


def test_singular_design_without_ridge():
    ds, _ = affine_dataset(n_rows=4)
    with pytest.raises(np.linalg.LinAlgError):
        fit(ds, ridge_lambda=0.0)
    fit(ds, ridge_lambda=1e-3)


def test_dataset_shape_and_determinism():
    net, fleet, ds = feeder_dataset(n=50)
    assert ds.features.shape == (50, 66)
    assert ds.targets.shape == (50, 33)
    _, _, again = feeder_dataset(n=50)
    np.testing.assert_array_equal(ds.features, again.features)
    with pytest.raises(ValueError):
        generate_dataset(net, fleet, np.ones((1, 33)), np.ones((1, 33)), 0, 0)


def test_feeder_fit_is_accurate():
    _, _, ds = feeder_dataset()
    rep = cross_validate(ds, k=5)
    assert rep.mae_mean < 1e-3
    assert rep.r2_mean > 0.99
    assert rep.degenerate_outputs == [0]


def test_prediction_is_affine_in_the_action():
    net, fleet, ds = feeder_dataset()
    model = fit(ds)
    base = feeder_base(net, fleet)
    zero = np.zeros(2 * len(fleet))
    a = np.tile([0.3, 0.4], len(fleet))
    b0 = model.predict(base, zero, fleet)
    np.testing.assert_allclose(b0, model.predict_features(model.spec.encode(base)))
    np.testing.assert_allclose(model.predict(base, 2 * a, fleet) - b0, 2 * (model.predict(base, a, fleet) - b0), atol=1e-12)


def test_affine_map_matches_explicit_injection():
    net, fleet, ds = feeder_dataset()
    model = fit(ds)
    base = feeder_base(net, fleet)
    a = np.array([0.2, -0.5, 1.0, 0.7, 0.0, -1.0, 0.5, 0.1, 0.9, -0.2])
    A, b = action_affine_map(model, base, fleet, np.sign(a[1::2]))
    p = base.active_kw.copy()
    for k, agent in enumerate(fleet.agents):
        rated = agent.ess.p_ch_max_kw if a[2 * k + 1] >= 0 else agent.ess.p_dis_max_kw
        p[agent.bus] += -a[2 * k] * agent.building.p_dr_max_kw + a[2 * k + 1] * rated
    direct = model.predict_features(model.spec.encode(InjectionProfile(p, base.reactive_kvar)))
    np.testing.assert_allclose(A @ a + b, direct, atol=1e-12)
    exact = solve_power_flow(net, InjectionProfile(p, base.reactive_kvar)).v_sq_pu
    assert np.max(np.abs(np.sqrt(direct) - np.sqrt(exact))) < 2e-3


def test_model_roundtrip(tmp_path):
    _, _, ds = feeder_dataset(n=100)
    model = fit(ds)
    model.save(tmp_path / "m.json")
    back = LinearVoltageModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict_features(ds.features), model.predict_features(ds.features))


def test_dropped_scenarios_are_excluded():
    net = chain_network(2, r=0.3, x=0.3)
    fleet = make_fleet([1], p_dr=0.0, p_ess=1e-6)
    # the second row is far beyond the loadability limit of the line
    rows = np.array([[0.0, 50.0], [0.0, 5000.0]])
    ds = generate_dataset(net, fleet, rows, rows, 40, seed=3, perturbation=(1.0, 1.0))
    assert 0 < len(ds) < 40
    assert np.all(np.isfinite(ds.targets))
