import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest

from datamodel import DataMatrix
from ica import (
    ComponentCountError,
    ICAConvergenceError,
    UnmixingModel,
    WhiteningError,
    component_kurtosis,
    fastica,
    match_sources,
    rank1_rmse,
    rmse_curve,
    rmse_knee,
    sort_components,
    whiten,
    with_rmse_curve,
    write_matches,
    write_unmixing,
)


def as_matrix(values):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[1]
    index = np.column_stack([np.arange(n), np.zeros(n, dtype=int), np.zeros(n, dtype=int)])
    return DataMatrix(values, index)


@pytest.fixture
def toy():
    """Uniform and Laplace maps mixed into six time points."""
    gen = np.random.Generator(np.random.PCG64(7))
    n = 10000
    maps = np.vstack([gen.uniform(-1.0, 1.0, n), gen.laplace(0.0, 1.0, n)])
    mixing = gen.standard_normal((6, 2))
    return SimpleNamespace(maps=maps, mixing=mixing, m=as_matrix(mixing @ maps))


def truth_from(timecourses, maps):
    specs = [SimpleNamespace(id=i + 1) for i in range(len(timecourses))]
    return SimpleNamespace(timecourses=np.asarray(timecourses), maps=np.asarray(maps)[:, np.newaxis, :],
                           flat_maps=np.asarray(maps), specs=specs)


# --- whitening ------------------------------------------------------------

def test_whitened_data_has_identity_covariance(rng):
    m = as_matrix(rng.standard_normal((40, 25)))
    model, whitened = whiten(m)
    assert model.k == 25
    np.testing.assert_allclose(whitened.T @ whitened / m.t, np.eye(25), atol=1e-8)
    np.testing.assert_allclose(model.transform(m), whitened, atol=1e-8)


def test_inverse_transform_restores_centered_data(rng):
    m = as_matrix(rng.standard_normal((12, 30)))
    model, whitened = whiten(m)
    centered = m.values - m.values.mean(axis=0)
    np.testing.assert_allclose(model.inverse_transform(whitened), centered, atol=1e-8)


def test_auto_rank_of_eight_source_mixture(mixture):
    model, _ = whiten(mixture)
    assert model.k == 8
    assert np.all(np.diff(model.eigenvalues) <= 0)


def test_two_time_points_leave_one_axis(rng):
    model, _ = whiten(as_matrix(rng.standard_normal((2, 10))))
    assert model.k <= 1


def test_whitening_errors(rng):
    with pytest.raises(ValueError):
        whiten(as_matrix(rng.standard_normal((1, 5))))
    with pytest.raises(WhiteningError):
        whiten(as_matrix(np.ones((5, 4))))
    with pytest.raises(ComponentCountError):
        whiten(as_matrix(rng.standard_normal((3, 10))), k=5)


# --- fastICA --------------------------------------------------------------

def test_separates_uniform_and_laplace(toy):
    u = fastica(toy.m, p=2, seed=0)
    assert u.converged
    corr = np.abs(np.corrcoef(np.vstack([toy.maps, u.S]))[:2, 2:])
    assert corr.max(axis=1).min() > 0.99
    assert sorted(corr.argmax(axis=1).tolist()) == [0, 1]


def test_maps_are_orthonormal_and_positively_skewed(toy):
    u = fastica(toy.m, p=2, seed=3)
    np.testing.assert_allclose(u.unmixing @ u.unmixing.T, np.eye(2), atol=1e-6)
    np.testing.assert_allclose(u.S @ u.S.T / toy.m.n, np.eye(2), atol=1e-6)
    assert np.all(np.mean(u.S ** 3, axis=1) >= 0)


def test_same_seed_is_reproducible(toy):
    a = fastica(toy.m, p=2, seed=11)
    b = fastica(toy.m, p=2, seed=11)
    np.testing.assert_array_equal(a.S, b.S)
    np.testing.assert_array_equal(a.T, b.T)


def test_cube_nonlinearity(toy):
    u = fastica(toy.m, p=2, nonlinearity="cube", seed=0)
    corr = np.abs(np.corrcoef(np.vstack([toy.maps, u.S]))[:2, 2:])
    assert corr.max(axis=1).min() > 0.98


def test_gaussian_sources_stay_gaussian():
    gen = np.random.Generator(np.random.PCG64(5))
    m = as_matrix(gen.standard_normal((4, 2)) @ gen.standard_normal((2, 10000)))
    u = fastica(m, p=2, seed=0, max_iter=200, strict=False)
    assert not u.converged or np.all(np.abs(component_kurtosis(u)) < 0.5)


def test_p_above_t_is_rejected(rng):
    with pytest.raises(ComponentCountError, match="p <= t"):
        fastica(as_matrix(rng.standard_normal((3, 50))), p=4)


def test_p_above_rank_is_rejected(mixture):
    with pytest.raises(ComponentCountError, match="whitened dimension"):
        fastica(mixture, p=9)


def test_invalid_arguments(toy):
    with pytest.raises(ValueError):
        fastica(toy.m, p=2, nonlinearity="exp")
    with pytest.raises(ValueError):
        fastica(toy.m, p=0)


def test_non_convergence(toy, caplog):
    with pytest.raises(ICAConvergenceError) as info:
        fastica(toy.m, p=2, tol=1e-15, max_iter=1, restarts=0)
    assert info.value.model is not None
    assert info.value.achieved_tol > 1e-15
    assert "did not converge" in caplog.text

    u = fastica(toy.m, p=2, tol=1e-15, max_iter=1, restarts=2, strict=False)
    assert not u.converged
    assert u.attempts == 3


# --- ordering and reconstruction ------------------------------------------

def test_single_component_order(toy):
    u = sort_components(fastica(toy.m, p=1), toy.m)
    assert u.order.tolist() == [0]


def test_equal_errors_keep_index_order():
    m = as_matrix([[1.0, -1.0, 2.0], [-1.0, 1.0, -2.0]])
    u = UnmixingModel(T=np.array([[1.0, 1.0], [-1.0, -1.0]]), S=np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]]),
                      mean=np.zeros(3), unmixing=np.eye(2))
    u = sort_components(u, m)
    assert u.component_rmse[0] == u.component_rmse[1]
    assert u.order.tolist() == [0, 1]


def test_rank1_rmse_matches_direct_reconstruction(toy):
    u = fastica(toy.m, p=2)
    xc = toy.m.values - u.mean
    direct = [np.sqrt(np.mean((xc - np.outer(u.T[:, j], u.S[j])) ** 2)) for j in range(2)]
    np.testing.assert_allclose(rank1_rmse(u, toy.m), direct, rtol=1e-8)


def test_rmse_curve_shape_and_endpoints(rng):
    m = as_matrix(rng.standard_normal((10, 400)) * np.linspace(5.0, 0.5, 10)[:, np.newaxis])
    u = with_rmse_curve(fastica(m, p=3, strict=False), m)
    curve = u.rmse_curve
    assert len(curve) == 4
    assert rmse_curve(u, m) == curve
    xc = m.values - m.values.mean(axis=0)
    assert curve[0] == pytest.approx(np.sqrt(np.mean(xc ** 2)))
    s = np.linalg.svd(xc, compute_uv=False)
    assert curve[-1] == pytest.approx(np.sqrt(np.sum(s[3:] ** 2) / xc.size), rel=1e-8)
    assert np.all(np.diff(curve) <= 1e-12 * curve[0])


def test_rmse_knee():
    assert rmse_knee([10.0, 2.0, 1.0, 0.5, 0.0]) == 1
    assert rmse_knee([1.0, 0.5]) == 1


def test_eight_sources_reconstruct_exactly(mixture, sources):
    u = with_rmse_curve(fastica(mixture, seed=0), mixture)
    assert u.p == 8
    assert u.converged
    assert u.rmse_curve[8] < 1e-6 * u.rmse_curve[0]
    matches = match_sources(u, sources, mixture)
    assert [mt.source_id for mt in matches] == list(range(1, 9))
    assert abs(matches[0].r) > 0.9
    assert abs(matches[0].map_r) > 0.9


@pytest.mark.slow
def test_task_source_found_from_other_seeds(mixture, sources):
    for seed in (1, 2):
        u = fastica(mixture, seed=seed)
        assert abs(match_sources(u, sources)[0].r) > 0.9


# --- ground-truth matching ------------------------------------------------

def test_model_matches_itself(toy):
    u = fastica(toy.m, p=2)
    matches = match_sources(u, truth_from(u.T.T, u.S))
    assert [mt.component for mt in matches] == [0, 1]
    assert all(mt.r == pytest.approx(1.0) for mt in matches)
    assert all(mt.rmse == pytest.approx(0.0, abs=1e-10) for mt in matches)


def test_sign_flip_is_still_a_match(toy):
    u = fastica(toy.m, p=2)
    matches = match_sources(u, truth_from(-u.T.T, u.S))
    assert [mt.component for mt in matches] == [0, 1]
    assert all(mt.r == pytest.approx(-1.0) for mt in matches)
    assert all(mt.rmse == pytest.approx(0.0, abs=1e-10) for mt in matches)


def test_length_mismatch_is_rejected(toy):
    u = fastica(toy.m, p=2)
    with pytest.raises(ValueError):
        match_sources(u, truth_from(np.ones((2, 5)), u.S))


# --- exports --------------------------------------------------------------

def test_write_unmixing_and_matches(tmp_path, toy):
    u = with_rmse_curve(fastica(toy.m, p=2), toy.m)
    path = write_unmixing(u, tmp_path, "toy", {"instance": "toy"})
    document = json.loads(path.read_text())
    assert document["p"] == 2
    assert document["instance"] == "toy"
    assert len(document["rmse_curve"]) == 3
    T = np.frombuffer((tmp_path / document["T_file"]).read_bytes(), dtype="<f8").reshape(6, 2)
    np.testing.assert_array_equal(T, u.T)

    matches = match_sources(u, truth_from(u.T.T, u.S))
    rows = list(csv.DictReader(write_matches(matches, tmp_path / "m.csv").read_text().splitlines()))
    assert [row["source_id"] for row in rows] == ["1", "2"]
    assert rows[0]["map_r"] == ""
