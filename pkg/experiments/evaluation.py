"""
Batch evaluation of the attack: ASR, iterations, diversity and quality divergence, plus the
files every run leaves behind.
"""
import logging
import os
import time
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from model_inference.diffusion_core import GuidanceSpec, NoiseSchedule, ddim_sample, default_steps
from model_inference.ivo_attack import (
    initial_latent, invert_reference, optimize_latent, reused_attack, store_if_successful)
from model_inference.latent_pool import EmptyPoolError, LatentPool
from schema.config import AttackConfig
from schema.records import AttackResult, DetectorSpec, RunReport
from utils.artifacts import (
    files_in, plot_asr_curve, plot_similarity_hist, remove_stale, write_csv, write_json, write_manifest)
from utils.detector import centroid_of
from utils.metrics import centered_cosine, mmd_estimate

ARTIFACT_NAMES = ("report.json", "per_attack.csv", "loss_traces.csv", "asr_curve.csv", "asr_curve.png",
                  "similarity.csv", "similarity.png")


def _as_points(samples) -> np.ndarray:
    points = np.atleast_2d(np.asarray(
        samples.detach().numpy() if isinstance(samples, torch.Tensor) else samples, dtype=np.float64))
    if len(points) == 0:
        raise ValueError("reference_samples must be non-empty")
    return points


def evaluate_attack(victim, surrogate, concept: str, n_attacks: int, mode: str, cfg: AttackConfig,
                    pool: Optional[LatentPool], detector: DetectorSpec, reference_samples,
                    schedule: NoiseSchedule, init: str = "inversion", init_reference=None,
                    budget: int = 5) -> RunReport:
    """
    Run n_attacks attacks with seeds cfg.seed + i.

    fresh   optimize from an initial latent ("inversion" of the reference sample, or "gaussian");
            successful latents are stored into `pool` when one is given
    reuse   replay pool latents (up to `budget` draws each); an empty pool is an error

    The inverted reference is `init_reference` when given, else the first clean reference sample.
    Diversity compares each successful output with that reference around the concept centroid;
    quality divergence is the MMD between successful outputs and the clean reference samples.
    """
    if n_attacks < 1:
        raise ValueError(f"n_attacks must be >= 1, got {n_attacks}")
    if mode not in ("fresh", "reuse"):
        raise ValueError(f"unknown mode {mode!r}")
    if init not in ("inversion", "gaussian"):
        raise ValueError(f"unknown init {init!r}")
    clean = _as_points(reference_samples)
    x_ref = np.asarray(init_reference, dtype=np.float64) if init_reference is not None else clean[0]
    victim_id = getattr(victim, "model_id", "victim")

    if mode == "reuse" and (pool is None or not pool.candidates(concept, cfg.pool_policy)):
        raise EmptyPoolError(f"reuse mode needs pool entries for {concept!r}")

    z_inv = None
    if mode == "fresh" and init == "inversion":
        z_inv = invert_reference(surrogate, x_ref, schedule)

    start = time.time()
    results: List[AttackResult] = []
    for i in range(n_attacks):
        run_cfg = cfg.model_copy(update={"seed": cfg.seed + i})
        if mode == "fresh":
            z0 = initial_latent(victim.data_dim, run_cfg.seed, z_inv, cfg.init_jitter if z_inv is not None else 0.0)
            result = optimize_latent(victim, surrogate, z0, concept, detector, run_cfg, schedule,
                                     init_kind=init)
            store_if_successful(pool, result, victim_id)
        else:
            result = reused_attack(victim, pool, concept, detector, run_cfg, budget, schedule,
                                   surrogate=surrogate, rng=np.random.default_rng(run_cfg.seed))
        results.append(result)
        logging.debug(f"[EVAL] attack {i + 1}/{n_attacks}: success={result.success} iters={result.iterations}")

    successes = [r for r in results if r.success]
    asr = len(successes) / n_attacks
    similarities, diversity, quality = [], None, None
    if successes:
        outputs = np.asarray([r.generated_sample for r in successes], dtype=np.float64)
        similarities = centered_cosine(outputs, x_ref, centroid_of(detector, concept)).tolist()
        diversity = float(np.mean(similarities))
        if len(outputs) >= 2 and len(clean) >= 2:
            quality = mmd_estimate(outputs, clean)

    report = RunReport(
        asr=asr,
        mean_iterations=float(np.mean([r.iterations for r in results])),
        diversity_mean_similarity=diversity,
        quality_divergence=quality,
        similarities=similarities,
        config_snapshot={**cfg.model_dump(), "mode": mode, "init": init, "n_attacks": n_attacks,
                         "budget": budget if mode == "reuse" else None},
        per_attack=results,
        victim_id=victim_id,
        concept=concept,
        mode=mode,
        reference_sample=x_ref.tolist(),
    )
    logging.info("[EVAL] {} {} on {}: asr={:.3f} mean_iters={:.2f} ({:.1f}s)".format(
        mode, concept, victim_id, report.asr, report.mean_iterations, time.time() - start))
    return report


@torch.no_grad()
def reconstruction_similarity(surrogate, x_ref, concept: str, n: int, cfg: AttackConfig,
                              detector: DetectorSpec, schedule: NoiseSchedule, jitter: float = 0.0) -> List[float]:
    """
    Diversity baseline without the attack: invert the reference on the surrogate, regenerate it
    from n seeded copies of that latent (jitter 0 reproduces the reference itself) and score
    the results exactly like attack outputs.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x_ref = np.asarray(x_ref, dtype=np.float64)
    z_inv = invert_reference(surrogate, x_ref, schedule)
    z = torch.stack([initial_latent(surrogate.data_dim, cfg.seed + i, z_inv, jitter) for i in range(n)])
    samples, _ = ddim_sample(surrogate, z, GuidanceSpec(0.0, None), default_steps(schedule), schedule)
    similarities = centered_cosine(samples.numpy(), x_ref, centroid_of(detector, concept)).tolist()
    logging.info(f"[EVAL] reconstruction baseline (jitter {jitter}): mean similarity {np.mean(similarities):.3f}")
    return similarities


def asr_curve(results: Sequence[AttackResult], max_iters: Optional[int] = None) -> pd.DataFrame:
    """ Fraction of attacks that succeeded within each iteration budget 0..max_iters """
    if not results:
        return pd.DataFrame(columns=["iteration_budget", "asr"])
    top = max_iters if max_iters is not None else max(r.iterations for r in results)
    budgets = np.arange(top + 1)
    iters = np.asarray([r.iterations if r.success else np.inf for r in results])
    asr = [(iters <= b).sum() / len(results) for b in budgets]
    return pd.DataFrame({"iteration_budget": budgets, "asr": asr})


def per_attack_frame(results: Sequence[AttackResult]) -> pd.DataFrame:
    rows = []
    for i, r in enumerate(results):
        row = {"attack": i, "seed": r.seed, "success": r.success, "iterations": r.iterations,
               "detector_verdict": r.detector_verdict or "", "init_kind": r.init_kind,
               "loss_timestep": r.loss_timestep, "chain_model": r.chain_model, "pool_draws": r.pool_draws}
        row.update({f"sample_{d}": v for d, v in enumerate(r.generated_sample)})
        row.update({f"latent_{d}": v for d, v in enumerate(r.final_latent)})
        rows.append(row)
    return pd.DataFrame(rows)


def loss_trace_frame(results: Sequence[AttackResult]) -> pd.DataFrame:
    rows = [{"attack": i, "iteration": k + 1, "loss_overall": o, "loss_dml": m, "loss_dcl": c}
            for i, r in enumerate(results) for k, (o, m, c) in enumerate(r.loss_trace)]
    return pd.DataFrame(rows, columns=["attack", "iteration", "loss_overall", "loss_dml", "loss_dcl"])


def emit_artifacts(report: RunReport, out_dir: str) -> dict:
    """
    report.json always; per-attack, loss-trace, ASR-curve and similarity CSVs with their plots
    when there are attacks. Files left by an earlier emission into the same directory are
    removed first; the sha256 manifest covers every file the directory then holds.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    remove_stale(out_dir, ARTIFACT_NAMES)
    written = [write_json(os.path.join(out_dir, "report.json"), report.model_dump(mode="json"))]
    if report.per_attack:
        written.append(write_csv(per_attack_frame(report.per_attack), os.path.join(out_dir, "per_attack.csv")))
        written.append(write_csv(loss_trace_frame(report.per_attack), os.path.join(out_dir, "loss_traces.csv")))
        curve = asr_curve(report.per_attack, report.config_snapshot.get("max_iters"))
        written.append(write_csv(curve, os.path.join(out_dir, "asr_curve.csv")))
        written.append(plot_asr_curve(curve, os.path.join(out_dir, "asr_curve.png")))
        if report.similarities:
            sims = pd.DataFrame({"similarity": report.similarities})
            written.append(write_csv(sims, os.path.join(out_dir, "similarity.csv")))
            written.append(plot_similarity_hist(report.similarities, os.path.join(out_dir, "similarity.png")))
    logging.debug(f"[ARTIFACT] wrote {len(written)} files to {out_dir}")
    return write_manifest(out_dir, files_in(out_dir))


def load_report(path: str) -> RunReport:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Report not found at: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return RunReport.model_validate_json(f.read())


def reference_bank(dataset, per_concept: int, seed: int = 0) -> dict:
    """ `per_concept` clean samples of every concept, drawn without replacement """
    rng = np.random.default_rng(seed)
    bank = {}
    for concept in dataset.concepts:
        members = dataset.samples_of(concept).numpy()
        if len(members) < per_concept:
            raise ValueError(f"concept {concept!r} has {len(members)} samples; need {per_concept}")
        bank[concept] = members[np.sort(rng.choice(len(members), per_concept, replace=False))].tolist()
    return bank


__all__ = ["evaluate_attack", "emit_artifacts", "asr_curve", "reconstruction_similarity", "load_report",
           "reference_bank"]
