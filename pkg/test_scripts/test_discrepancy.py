import logging
import os

import numpy as np
import pytest

from conftest import CONCEPTS
from model_inference.discrepancy import (
    collect_noise_stats, per_step_gap, profile_correlation, unlearning_profile)
from model_inference.unlearning import erase_guidance, wrap_base
from schema.config import ErasureConfig, ProfileSettings
from schema.records import MmdReport
from utils.metrics import median_bandwidth, mmd_estimate, rank_correlation

RNG = np.random.default_rng(0)
A = RNG.normal(size=(60, 3))
B = RNG.normal(size=(60, 3))
FAR = RNG.normal(size=(60, 3)) + 4.0


# region MMD
def test_mmd_is_symmetric_to_the_bit():
    assert mmd_estimate(A, FAR, bandwidth=1.0) == mmd_estimate(FAR, A, bandwidth=1.0)


def test_mmd_of_a_sample_with_itself_is_zero():
    assert mmd_estimate(A, A) == 0.0


def test_mmd_separates_shifted_distributions():
    assert mmd_estimate(A, FAR) > mmd_estimate(A, B)
    assert mmd_estimate(A, B) >= 0.0


def test_mmd_needs_two_points_per_sample():
    with pytest.raises(ValueError):
        mmd_estimate(A[:1], B)
    with pytest.raises(ValueError):
        mmd_estimate(A, B[:, :2])


def test_degenerate_bandwidth_falls_back_to_one(caplog):
    same = np.ones((5, 2))
    with caplog.at_level(logging.WARNING):
        assert median_bandwidth(same, same) == 1.0
    assert "bandwidth 1.0" in caplog.text


def test_mmd_at_five_hundred_points_separates_shifted_gaussians():
    gen = np.random.default_rng(11)
    a = gen.normal(size=(500, 1))
    same = gen.normal(size=(500, 1))
    shifted = gen.normal(loc=5.0, size=(500, 1))
    self_value = mmd_estimate(a, same)
    assert self_value <= 0.05
    assert mmd_estimate(a, shifted) >= 10 * max(self_value, 1e-3)


def test_rank_correlation_of_reversed_order():
    assert rank_correlation([1, 2, 3, 4], [40, 30, 20, 10]) == pytest.approx(-1.0)
# endregion


# region profile
def small_settings():
    return ProfileSettings(n_latents=4, guide_scale=3.0, asr_samples=8, mmd_max_samples=200, seed=0)


def test_noise_stats_shapes_and_identity_gap(tiny_net, schedule):
    steps = [100, 75, 50, 25, 1]
    stats = collect_noise_stats(tiny_net, CONCEPTS[:2], 4, schedule, 3.0, steps=steps)
    assert stats.raw.shape == (5, 8, 2)
    assert stats.pooled(schedule.T).shape == (40, 3)
    assert per_step_gap(stats, stats) == [0.0] * 5
    with pytest.raises(ValueError):
        collect_noise_stats(tiny_net, CONCEPTS, 1, schedule, 3.0)


def test_noise_stats_are_seeded(tiny_net, schedule):
    steps = [100, 50, 1]
    first = collect_noise_stats(tiny_net, CONCEPTS, 3, schedule, 3.0, seed=4, steps=steps)
    again = collect_noise_stats(tiny_net, CONCEPTS, 3, schedule, 3.0, seed=4, steps=steps)
    other = collect_noise_stats(tiny_net, CONCEPTS, 3, schedule, 3.0, seed=5, steps=steps)
    assert np.array_equal(first.raw, again.raw)
    assert np.array_equal(first.means, again.means) and np.array_equal(first.variances, again.variances)
    assert not np.array_equal(first.raw, other.raw)


def test_zero_predictor_has_all_zero_noise_stats(zero_net, schedule):
    stats = collect_noise_stats(zero_net, CONCEPTS, 4, schedule, 3.0)
    assert not stats.raw.any()
    assert not stats.means.any() and not stats.variances.any()
    assert not stats.mean_norms.any()


def test_profile_orders_reports_and_zero_for_identical_model(tiny_net, schedule, accept_all_detector, tmp_path):
    base = wrap_base(tiny_net)
    guarded = erase_guidance(tiny_net, ErasureConfig(method="guidance_erase", target_concept="nudity", strength=4.0))
    reports = unlearning_profile(base, [guarded, wrap_base(tiny_net)], CONCEPTS, accept_all_detector,
                                 small_settings(), schedule, out_dir=str(tmp_path))
    values = [r.mmd_value for r in reports]
    assert values == sorted(values)
    assert reports[0].mmd_value == 0.0
    assert all(r.kernel_bandwidth > 0 and r.naive_asr == 1.0 for r in reports)
    assert len(reports[0].per_step_gap) == schedule.T
    assert sorted(os.listdir(tmp_path)) == ["profile_reports.json", "trajectory_curves.csv", "trajectory_curves.png"]


def test_profile_needs_victims(tiny_net, schedule, accept_all_detector):
    with pytest.raises(ValueError):
        unlearning_profile(wrap_base(tiny_net), [], CONCEPTS, accept_all_detector, small_settings(), schedule)


def test_profile_correlation_over_reports():
    reports = [MmdReport(model_ids=("base", f"v{i}"), mmd_value=m, naive_asr=a, per_step_gap=[],
                         kernel_bandwidth=1.0)
               for i, (m, a) in enumerate([(0.1, 0.9), (0.5, 0.6), (1.2, 0.3), (3.0, 0.05)])]
    assert profile_correlation(reports) == pytest.approx(-1.0)
# endregion
