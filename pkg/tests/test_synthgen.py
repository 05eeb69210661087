import numpy as np
import pytest

from synthgen import (
    MAP_DIMS,
    SOURCE_SPECS,
    TIMECOURSE_LEN,
    SynthConstants,
    canonical_hrf,
    excess_kurtosis,
    generate_sources,
    make_rng,
    mix,
    read_ground_truth,
    write_ground_truth,
)


def test_shapes_and_specs(sources):
    assert sources.maps.shape == (8,) + MAP_DIMS
    assert sources.timecourses.shape == (8, TIMECOURSE_LEN)
    assert [spec.name for spec in sources.specs] == [f"S{i}" for i in range(1, 9)]
    assert sources.flat_maps.shape == (8, 3600)


def test_same_seed_is_bit_identical(sources):
    again = generate_sources(1)
    assert again.maps.tobytes() == sources.maps.tobytes()
    assert again.timecourses.tobytes() == sources.timecourses.tobytes()


def test_different_seeds_differ(sources):
    other = generate_sources(2)
    assert not np.array_equal(other.maps, sources.maps)
    # deterministic maps do not depend on the seed
    np.testing.assert_array_equal(other.maps[0], sources.maps[0])


def test_maps_have_unit_peak(sources):
    np.testing.assert_allclose(np.abs(sources.maps).max(axis=(1, 2)), 1.0)
    np.testing.assert_allclose(np.abs(sources.timecourses).max(axis=1), 1.0)


@pytest.mark.parametrize("spec", SOURCE_SPECS, ids=lambda s: s.name)
def test_map_statistics_match_declared_gaussianity(sources, spec):
    kurt = excess_kurtosis(sources.maps[spec.id - 1])
    if spec.gaussianity == "super":
        assert kurt > 1.0
    elif spec.gaussianity == "sub":
        assert kurt < -0.5
    else:
        assert abs(kurt) < 0.3


def test_hrf_peaks_early_and_undershoots():
    hrf = canonical_hrf()
    assert hrf.max() == pytest.approx(1.0)
    assert 2 <= int(np.argmax(hrf)) <= 4
    assert hrf.min() < 0


def test_task_source_follows_block_design(sources):
    task = sources.timecourses[0]
    period = SynthConstants().block_period
    on = np.array([(i % period) >= period // 2 for i in range(TIMECOURSE_LEN)])
    lagged = np.roll(on, 3)
    assert task[lagged].mean() > task[~lagged].mean()


def test_make_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        make_rng(-1)


def test_noiseless_mixture_is_exact_sum(sources, mixture):
    expected = sources.timecourses.T @ sources.flat_maps
    np.testing.assert_allclose(mixture.values, expected, atol=1e-12)
    assert mixture.spacing_mm == (3.0, 3.0, 4.0)


def test_mixture_has_rank_eight(mixture):
    s = np.linalg.svd(mixture.values - mixture.values.mean(axis=0), compute_uv=False)
    assert np.sum(s > 1e-8 * s[0]) == 8


def test_noise_is_seeded_and_scaled(sources, mixture):
    a = mix(sources, noise_level=0.1, seed=7)
    b = mix(sources, noise_level=0.1, seed=7)
    c = mix(sources, noise_level=0.1, seed=8)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    rms = np.sqrt(np.mean(mixture.values ** 2))
    noise_std = (a.values - mixture.values).std()
    assert noise_std == pytest.approx(0.1 * rms, rel=0.05)


def test_negative_noise_rejected(sources):
    with pytest.raises(ValueError):
        mix(sources, noise_level=-0.1)


def test_ground_truth_round_trip(tmp_path, sources):
    write_ground_truth(sources, tmp_path)
    back = read_ground_truth(tmp_path)
    np.testing.assert_array_equal(back.maps, sources.maps)
    np.testing.assert_array_equal(back.timecourses, sources.timecourses)
    assert back.seed == 1
    assert [s.gaussianity for s in back.specs] == [s.gaussianity for s in sources.specs]
    assert back.constants == sources.constants
