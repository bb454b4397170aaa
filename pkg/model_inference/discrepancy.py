"""
Noise-trajectory discrepancy between a base model and its unlearned victims.

For a prompt set, every model denoises the same seeded initial latents while the
per-step noise predictions are recorded; the MMD between the pooled predictions of
base and victim measures how far unlearning moved the symbol-to-knowledge mapping.
"""
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from model_inference.diffusion_core import DTYPE, GuidanceSpec, NoiseSchedule, ddim_sample, default_steps
from model_inference.unlearning import naive_asr
from schema.config import ProfileSettings
from schema.records import DetectorSpec, MmdReport
from utils.artifacts import plot_trajectory_curves, write_json
from utils.metrics import median_bandwidth, mmd_estimate, rank_correlation


@dataclass
class TrajectoryStats:
    """ Per-step summaries of predicted noise over all prompts and latents """
    steps: List[int]
    means: np.ndarray          # (S,) mean over runs and coordinates
    variances: np.ndarray      # (S,) variance over runs and coordinates
    mean_vectors: np.ndarray   # (S, D) per-step mean prediction
    raw: Optional[np.ndarray] = None  # (S, N, D) retained predictions

    def __post_init__(self):
        if not (len(self.means) == len(self.variances) == len(self.steps)):
            raise ValueError("means, variances and steps must have the same length")

    @property
    def mean_norms(self) -> np.ndarray:
        return np.linalg.norm(self.mean_vectors, axis=1)

    def pooled(self, T: int) -> np.ndarray:
        """ Raw predictions flattened to (S * N, D + 1), each tagged with t / T """
        if self.raw is None:
            raise ValueError("raw predictions were not retained")
        S, N, D = self.raw.shape
        tags = np.repeat(np.asarray(self.steps, dtype=np.float64) / T, N)[:, None]
        return np.concatenate([self.raw.reshape(S * N, D), tags], axis=1)


@torch.no_grad()
def collect_noise_stats(model, concepts: Sequence[str], n_latents: int, schedule: NoiseSchedule,
                        guide_scale: float, seed: int = 0, keep_raw: bool = True,
                        steps: Optional[List[int]] = None) -> TrajectoryStats:
    """ Denoise n_latents seeded latents per concept and summarise the predicted noise per step """
    if n_latents < 2:
        raise ValueError(f"n_latents must be >= 2, got {n_latents}")
    steps = steps or default_steps(schedule)
    per_concept = []
    for k, concept in enumerate(concepts):
        gen = torch.Generator().manual_seed(seed * 1000 + k)
        z_init = torch.randn(n_latents, model.data_dim, generator=gen, dtype=DTYPE)
        _, traj = ddim_sample(model, z_init, GuidanceSpec(guide_scale, concept), steps, schedule)
        per_concept.append(torch.stack(traj.noise_preds).numpy())
    preds = np.concatenate(per_concept, axis=1)  # (S, N, D)
    return TrajectoryStats(
        steps=list(steps),
        means=preds.mean(axis=(1, 2)),
        variances=preds.var(axis=(1, 2)),
        mean_vectors=preds.mean(axis=1),
        raw=preds if keep_raw else None,
    )


def per_step_gap(a: TrajectoryStats, b: TrajectoryStats) -> List[float]:
    """ |mean vector difference| + |variance difference| at each step """
    gap = np.linalg.norm(a.mean_vectors - b.mean_vectors, axis=1) + np.abs(a.variances - b.variances)
    return gap.tolist()


def _subsample(pool: np.ndarray, limit: int, seed: int) -> np.ndarray:
    if len(pool) <= limit:
        return pool
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=limit, replace=False))
    return pool[idx]


def curves_frame(stats_by_model) -> pd.DataFrame:
    """ One row per (step, model_id) with mean_norm and variance """
    rows = []
    for model_id, stats in stats_by_model:
        for step, norm, var in zip(stats.steps, stats.mean_norms, stats.variances):
            rows.append({"step": step, "model_id": model_id, "mean_norm": float(norm), "variance": float(var)})
    return pd.DataFrame(rows, columns=["step", "model_id", "mean_norm", "variance"])


def unlearning_profile(base, victims: Sequence, concepts: Sequence[str], detector: DetectorSpec,
                       settings: ProfileSettings, schedule: NoiseSchedule,
                       out_dir: Optional[str] = None, asr_concept: Optional[str] = None) -> List[MmdReport]:
    """
    One MmdReport per victim (base and victim share latents), sorted by mmd_value. Naive ASR is
    measured on the victim's erased concept, or on `asr_concept` when given.
    """
    if not victims:
        raise ValueError("victims must be non-empty")
    for victim in victims:
        if list(victim.concepts) != list(base.concepts):
            raise ValueError(f"vocabulary mismatch between base {base.concepts} and "
                             f"{getattr(victim, 'model_id', '?')} {victim.concepts}")

    base_id = getattr(base, "model_id", "base")
    base_stats = collect_noise_stats(base, concepts, settings.n_latents, schedule, settings.guide_scale,
                                     seed=settings.seed)
    base_pool = _subsample(base_stats.pooled(schedule.T), settings.mmd_max_samples, settings.seed)
    curves = [(base_id, base_stats)]
    reports = []
    for victim in victims:
        stats = collect_noise_stats(victim, concepts, settings.n_latents, schedule, settings.guide_scale,
                                    seed=settings.seed)
        victim_pool = _subsample(stats.pooled(schedule.T), settings.mmd_max_samples, settings.seed)
        bandwidth = settings.bandwidth or median_bandwidth(base_pool, victim_pool)
        mmd = mmd_estimate(base_pool, victim_pool, bandwidth=bandwidth)
        target = asr_concept or (victim.erasure.target_concept if getattr(victim, "erasure", None) else concepts[0])
        asr = naive_asr(victim, target, detector, settings.asr_samples, settings.guide_scale, schedule,
                        seed=settings.seed)
        logging.info(f"[PROFILE] {victim.model_id}: mmd={mmd:.4f} naive_asr={asr:.3f}")
        reports.append(MmdReport(
            model_ids=(base_id, victim.model_id),
            mmd_value=mmd,
            naive_asr=asr,
            per_step_gap=per_step_gap(base_stats, stats),
            kernel_bandwidth=bandwidth,
            erasure=victim.erasure_block() if hasattr(victim, "erasure_block") else None,
            settings=settings.model_dump(),
        ))
        curves.append((victim.model_id, stats))

    reports.sort(key=lambda r: r.mmd_value)
    if out_dir is not None:
        write_profile(reports, curves_frame(curves), out_dir)
    return reports


def profile_correlation(reports: Sequence[MmdReport]) -> float:
    """ Spearman correlation between mmd_value and naive_asr across reports """
    return rank_correlation([r.mmd_value for r in reports], [r.naive_asr for r in reports])


def write_profile(reports: Sequence[MmdReport], curves: pd.DataFrame, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    curves_path = os.path.join(out_dir, "trajectory_curves.csv")
    curves.to_csv(curves_path, index=False, float_format="%.10g")
    report_path = write_json(os.path.join(out_dir, "profile_reports.json"),
                             [r.model_dump(mode="json") for r in reports])
    plot_path = plot_trajectory_curves(curves, os.path.join(out_dir, "trajectory_curves.png"))
    logging.info(f"[PROFILE] wrote {curves_path}, {report_path}, {plot_path}")
    return [curves_path, report_path, plot_path]
