import json
import os

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import CONCEPTS, MEANS
from experiments.ablations import StudyContext, latent_type_study, loss_study, run_study, timestep_study
from experiments.evaluation import (
    asr_curve, emit_artifacts, evaluate_attack, load_report, reconstruction_similarity, reference_bank)
from model_inference.diffusion_core import ConceptDataset, make_mixture_dataset
from model_inference.latent_pool import EmptyPoolError, LatentPool
from model_inference.unlearning import wrap_base
from schema.config import ExperimentConfig, MixtureConfig
from schema.records import AttackResult, DetectorSpec, RunReport
from utils.detector import detect, detect_batch, train_detector

REFERENCES = [[2.0, 2.1], [1.9, 2.0], [2.1, 1.8]]


# region detector
def test_detector_centroids_of_exact_means():
    points = torch.tensor(MEANS * 10, dtype=torch.float64)
    labels = CONCEPTS * 10
    spec = {c: (m, 0.25) for c, m in zip(CONCEPTS, MEANS)}
    detector = train_detector(ConceptDataset(points, labels, spec))
    assert detector.centroids == MEANS
    assert detector.sigmas == [0.0] * 4


def test_detector_centroids_from_samples_are_close_to_the_means():
    detector = train_detector(make_mixture_dataset(MixtureConfig(n_per_concept=1000), seed=3))
    assert np.abs(np.asarray(detector.centroids) - np.asarray(MEANS)).max() < 0.1
    assert detector.sigmas == pytest.approx([0.25] * 4, abs=0.03)


def test_detector_needs_ten_samples_per_concept():
    with pytest.raises(ValueError):
        train_detector(make_mixture_dataset(MixtureConfig(n_per_concept=5)))


def test_detect_rules(mixture_detector):
    assert detect(mixture_detector, [2.0, 2.0]) == "nudity"
    assert detect(mixture_detector, [10.0, 10.0]) is None
    tie = DetectorSpec(concepts=["a", "b"], centroids=[[1.0, 0.0], [-1.0, 0.0]], sigmas=[1.0, 1.0])
    assert detect(tie, [0.0, 0.0]) == "a"
    with pytest.raises(ValueError):
        detect(mixture_detector, [float("nan"), 0.0])


def test_detector_agrees_with_brute_force_scan(mixture_detector):
    grid = np.random.default_rng(1).uniform(-3.5, 3.5, size=(1000, 2))
    got = detect_batch(mixture_detector, grid)
    for x, verdict in zip(grid, got):
        d = [np.sqrt(((x - np.asarray(c)) ** 2).sum()) for c in mixture_detector.centroids]
        k = int(np.argmin(d))
        expected = mixture_detector.concepts[k] if d[k] <= 3.0 * mixture_detector.sigmas[k] else None
        assert verdict == expected
# endregion


# region evaluation
def test_fresh_batch_on_accepting_detector(tiny_net, other_net, schedule, accept_all_detector, quick_attack):
    pool = LatentPool(data_dim=2, concepts=CONCEPTS)
    report = evaluate_attack(wrap_base(tiny_net), other_net, "nudity", 4, "fresh", quick_attack, pool,
                             accept_all_detector, REFERENCES, schedule)
    assert report.asr == 1.0 and report.mean_iterations == 0.0
    assert [r.seed for r in report.per_attack] == [0, 1, 2, 3]
    assert len(pool) == 4
    assert len(report.similarities) == 4
    assert -1.0 - 1e-9 <= report.diversity_mean_similarity <= 1.0 + 1e-9
    assert report.quality_divergence >= 0.0
    assert report.config_snapshot["mode"] == "fresh"


def test_batch_that_never_succeeds(tiny_net, other_net, schedule, reject_all_detector, quick_attack):
    cfg = quick_attack.model_copy(update={"max_iters": 1})
    report = evaluate_attack(wrap_base(tiny_net), other_net, "nudity", 2, "fresh", cfg, None,
                             reject_all_detector, REFERENCES, schedule, init="gaussian")
    assert report.asr == 0.0 and report.mean_iterations == 1.0
    assert report.diversity_mean_similarity is None and report.quality_divergence is None


def test_reuse_batch_needs_a_pool(tiny_net, other_net, schedule, accept_all_detector, quick_attack):
    with pytest.raises(EmptyPoolError):
        evaluate_attack(wrap_base(tiny_net), other_net, "nudity", 2, "reuse", quick_attack,
                        LatentPool(data_dim=2, concepts=CONCEPTS), accept_all_detector, REFERENCES, schedule)
    with pytest.raises(ValueError):
        evaluate_attack(wrap_base(tiny_net), other_net, "nudity", 0, "fresh", quick_attack, None,
                        accept_all_detector, REFERENCES, schedule)


def test_reuse_batch_replays_stored_latents(tiny_net, other_net, schedule, accept_all_detector, quick_attack):
    pool = LatentPool(data_dim=2, concepts=CONCEPTS)
    victim = wrap_base(tiny_net)
    evaluate_attack(victim, other_net, "nudity", 2, "fresh", quick_attack, pool, accept_all_detector,
                    REFERENCES, schedule)
    report = evaluate_attack(victim, other_net, "nudity", 3, "reuse", quick_attack, pool, accept_all_detector,
                             REFERENCES, schedule, budget=2)
    assert report.asr == 1.0 and all(r.pool_draws == 1 for r in report.per_attack)


def result(success, iterations):
    return AttackResult(success=success, final_latent=[0.0, 0.0], iterations=iterations,
                        loss_trace=[(1.0, 0.5, 0.5)] * iterations, generated_sample=[0.0, 0.0],
                        detector_verdict="nudity" if success else None, target_concept="nudity")


def test_asr_curve_counts_successes_within_budget():
    curve = asr_curve([result(True, 0), result(True, 2), result(False, 3)], max_iters=3)
    assert curve["iteration_budget"].tolist() == [0, 1, 2, 3]
    assert curve["asr"].tolist() == pytest.approx([1 / 3, 1 / 3, 2 / 3, 2 / 3])


def test_report_asr_must_match_per_attack():
    with pytest.raises(ValueError):
        RunReport(asr=1.0, mean_iterations=0.0, per_attack=[result(True, 0), result(False, 1)])
# endregion


# region artifacts
def sample_report():
    attacks = [result(True, 1), result(False, 2)]
    return RunReport(asr=0.5, mean_iterations=1.5, similarities=[0.2], diversity_mean_similarity=0.2,
                     per_attack=attacks, config_snapshot={"max_iters": 2}, concept="nudity")


def test_empty_report_writes_report_and_manifest_only(tmp_path):
    manifest = emit_artifacts(RunReport(asr=0.0, mean_iterations=0.0), str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["manifest.json", "report.json"]
    assert list(manifest) == ["report.json"]


def test_manifest_lists_exactly_the_files_on_disk(tmp_path):
    manifest = emit_artifacts(sample_report(), str(tmp_path))
    on_disk = set(os.listdir(tmp_path)) - {"manifest.json"}
    assert set(manifest) == on_disk
    assert {"per_attack.csv", "loss_traces.csv", "asr_curve.csv", "asr_curve.png",
            "similarity.csv", "similarity.png"} <= on_disk
    with open(tmp_path / "manifest.json") as f:
        assert json.load(f) == manifest


def test_same_report_hashes_identically(tmp_path):
    first = emit_artifacts(sample_report(), str(tmp_path / "a"))
    second = emit_artifacts(sample_report(), str(tmp_path / "b"))
    assert first == second


def test_report_reloads_and_rerenders(tmp_path):
    emit_artifacts(sample_report(), str(tmp_path / "a"))
    reloaded = load_report(str(tmp_path / "a" / "report.json"))
    assert reloaded == sample_report()
    with pytest.raises(FileNotFoundError):
        load_report(str(tmp_path / "missing.json"))


def test_re_emission_drops_files_the_new_report_does_not_produce(tmp_path):
    emit_artifacts(sample_report(), str(tmp_path))
    assert (tmp_path / "similarity.csv").exists()
    bare = sample_report().model_copy(update={"similarities": [], "diversity_mean_similarity": None})
    manifest = emit_artifacts(bare, str(tmp_path))
    on_disk = set(os.listdir(tmp_path)) - {"manifest.json"}
    assert set(manifest) == on_disk
    assert "similarity.csv" not in on_disk and "similarity.png" not in on_disk
    manifest = emit_artifacts(RunReport(asr=0.0, mean_iterations=0.0), str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["manifest.json", "report.json"]
    assert list(manifest) == ["report.json"]

# endregion


# region studies
@pytest.fixture
def study_ctx(tiny_net, other_net, schedule, accept_all_detector, quick_attack):
    cfg = ExperimentConfig().model_copy(update={"attack": quick_attack})
    refs = reference_bank(make_mixture_dataset(MixtureConfig(n_per_concept=20)), per_concept=3)
    return StudyContext(victim=wrap_base(tiny_net), surrogate=other_net, detector=accept_all_detector,
                        references=refs, schedule=schedule, config=cfg, n_attacks=2)


def test_loss_study_has_one_row_per_variant(study_ctx, tmp_path):
    frame = loss_study(study_ctx, str(tmp_path))
    assert frame["variant"].tolist() == ["dual", "dml_only", "dcl_only"]
    assert (frame["asr"] == 1.0).all()
    assert os.path.exists(tmp_path / "loss.csv")


def test_latent_type_study_covers_four_sources(study_ctx):
    frame = latent_type_study(study_ctx)
    assert frame["latent_type"].tolist() == ["gaussian", "safe", "matching", "cross"]
    assert frame["source_concept"].tolist() == ["", "cat", "nudity", "violence"]


def test_timestep_study_grid(study_ctx):
    frame = timestep_study(study_ctx)
    assert len(frame) == 4 * 3
    assert sorted(set(frame["loss_step_index"])) == [1, 4, 6, 9]


def test_reconstruction_baseline_reproduces_the_reference(zero_net, schedule, accept_all_detector, quick_attack):
    x_ref = REFERENCES[0]
    sims = reconstruction_similarity(zero_net, x_ref, "nudity", 3, quick_attack, accept_all_detector, schedule)
    assert sims == pytest.approx([1.0] * 3, abs=1e-9)
    jittered = reconstruction_similarity(zero_net, x_ref, "nudity", 3, quick_attack, accept_all_detector,
                                         schedule, jitter=0.5)
    assert len(jittered) == 3 and all(-1.0 <= s <= 1.0 for s in jittered)
    assert min(jittered) < 1.0 - 1e-6
    with pytest.raises(ValueError):
        reconstruction_similarity(zero_net, x_ref, "nudity", 0, quick_attack, accept_all_detector, schedule)


def test_diversity_study_reports_attack_and_both_baselines(study_ctx, zero_net, tmp_path):
    study_ctx.surrogate = zero_net
    frame = run_study("diversity", study_ctx, str(tmp_path))
    assert frame["variant"].tolist() == ["attack", "reconstruction", "jittered_reconstruction"]
    assert frame["n"].tolist() == [2, 2, 2]
    rows = frame.set_index("variant")
    assert rows.loc["attack", "asr"] == 1.0
    assert rows.loc["reconstruction", "mean_similarity"] == pytest.approx(1.0, abs=1e-9)
    assert -1.0 <= rows.loc["attack", "mean_similarity"] <= 1.0
    samples = pd.read_csv(tmp_path / "diversity_similarities.csv")
    assert len(samples) == 6 and set(samples["variant"]) == set(frame["variant"])
    assert (tmp_path / "diversity.csv").exists()


def test_unknown_study(study_ctx):
    with pytest.raises(ValueError):
        run_study("nope", study_ctx)
# endregion
