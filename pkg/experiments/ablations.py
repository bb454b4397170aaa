"""
Ablation studies around the attack. Each study returns one DataFrame (one row per variant)
and writes it as <out_dir>/<study>.csv when out_dir is given.
"""
import itertools
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from model_inference.diffusion_core import (
    DTYPE, GuidanceSpec, NoiseSchedule, ddim_sample, default_steps, make_mixture_dataset, train_epsilon_net)
from model_inference.latent_pool import LatentPool
from model_inference.unlearning import erase_finetune, wrap_base
from schema.config import AttackConfig, ErasureConfig, ExperimentConfig
from schema.records import DetectorSpec
from utils.artifacts import write_csv
from utils.detector import detect_batch
from experiments.evaluation import evaluate_attack, reconstruction_similarity

METRICS = ("cosine", "l1", "l2", "kl", "js")


@dataclass
class StudyContext:
    """ Models, detector and clean references shared by every study """
    victim: object
    surrogate: object
    detector: DetectorSpec
    references: Dict[str, List[List[float]]]
    schedule: NoiseSchedule
    config: ExperimentConfig
    n_attacks: Optional[int] = None
    extras: Dict[str, object] = field(default_factory=dict)

    @property
    def attack(self) -> AttackConfig:
        return self.config.attack

    @property
    def concept(self) -> str:
        return self.config.harness.target_concept

    @property
    def attacks(self) -> int:
        return self.n_attacks or self.config.harness.n_attacks

    def run(self, cfg: AttackConfig, victim=None, surrogate=None, mode: str = "fresh",
            pool: Optional[LatentPool] = None, n_attacks: Optional[int] = None, **kwargs):
        return evaluate_attack(
            self.victim if victim is None else victim,
            self.surrogate if surrogate is None else surrogate,
            self.concept, n_attacks or self.attacks, mode, cfg, pool, self.detector,
            self.references[self.concept], self.schedule, **kwargs)


def _row(report, **labels) -> dict:
    return {**labels, "asr": report.asr, "mean_iterations": report.mean_iterations,
            "diversity_mean_similarity": report.diversity_mean_similarity,
            "quality_divergence": report.quality_divergence}


def _finish(name: str, rows: List[dict], out_dir: Optional[str]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(frame, os.path.join(out_dir, f"{name}.csv"))
    logging.info(f"[EVAL] study {name}: {len(frame)} variants")
    return frame


def loss_study(ctx: StudyContext, out_dir: Optional[str] = None) -> pd.DataFrame:
    """ Dual loss against DML-only and DCL-only """
    variants = {"dual": (1.0, 1.0), "dml_only": (1.0, 0.0), "dcl_only": (0.0, 1.0)}
    rows = []
    for name, (w_dml, w_dcl) in variants.items():
        cfg = ctx.attack.model_copy(update={"dml_weight": w_dml, "dcl_weight": w_dcl})
        rows.append(_row(ctx.run(cfg), variant=name, dml_weight=w_dml, dcl_weight=w_dcl))
    return _finish("loss", rows, out_dir)


def _other_concept(ctx: StudyContext, exclude: Sequence[str]) -> str:
    for concept in ctx.references:
        if concept not in exclude:
            return concept
    raise ValueError("no concept left for cross-concept initialisation")


def latent_type_study(ctx: StudyContext, out_dir: Optional[str] = None,
                      cross_concept: Optional[str] = None) -> pd.DataFrame:
    """
    Where the initial latent comes from: Gaussian noise, inversion of a benign sample ("safe"),
    of a target-concept sample ("matching") or of another sensitive concept ("cross").
    """
    benign = ctx.config.harness.benign_concept
    cross = cross_concept or _other_concept(ctx, (ctx.concept, benign))
    sources = {"gaussian": None, "safe": benign, "matching": ctx.concept, "cross": cross}
    rows = []
    for kind, source in sources.items():
        if source is None:
            report = ctx.run(ctx.attack, init="gaussian")
        else:
            report = ctx.run(ctx.attack, init="inversion", init_reference=ctx.references[source][0])
        rows.append(_row(report, latent_type=kind, source_concept=source or ""))
    return _finish("latent_type", rows, out_dir)


def timestep_study(ctx: StudyContext, out_dir: Optional[str] = None) -> pd.DataFrame:
    """ Loss step depth (percent of the step list) against the iteration cap """
    n_steps = ctx.attack.n_inference_steps
    rows = []
    for depth, cap in itertools.product(ctx.config.harness.timestep_depths, ctx.config.harness.iteration_caps):
        index = min(max(1, (depth * n_steps + 50) // 100), n_steps)
        cfg = ctx.attack.model_copy(update={"loss_step_index": index, "max_iters": cap})
        rows.append(_row(ctx.run(cfg), depth=depth, loss_step_index=index, max_iters=cap))
    return _finish("timestep", rows, out_dir)


def metric_grid_study(ctx: StudyContext, out_dir: Optional[str] = None,
                      metrics: Sequence[str] = METRICS) -> pd.DataFrame:
    rows = []
    for dml, dcl in itertools.product(metrics, metrics):
        cfg = ctx.attack.model_copy(update={"dml_metric": dml, "dcl_metric": dcl})
        rows.append(_row(ctx.run(cfg), dml_metric=dml, dcl_metric=dcl))
    return _finish("metric_grid", rows, out_dir)


def chain_carrier_study(ctx: StudyContext, out_dir: Optional[str] = None) -> pd.DataFrame:
    rows = []
    for carrier in ("victim", "surrogate"):
        cfg = ctx.attack.model_copy(update={"chain_model": carrier})
        rows.append(_row(ctx.run(cfg), chain_model=carrier))
    return _finish("chain_carrier", rows, out_dir)


def surrogate_study(ctx: StudyContext, out_dir: Optional[str] = None,
                    strengths: Sequence[float] = (0.0, 0.5, 1.0)) -> pd.DataFrame:
    """ Attack with a surrogate that has itself been fine-tune erased at increasing strength """
    surrogate_net = getattr(ctx.surrogate, "net", ctx.surrogate)
    rows = []
    for strength in strengths:
        erasure = ErasureConfig(**{**ctx.config.erasure.model_dump(), "method": "finetune_erase",
                                   "target_concept": ctx.concept, "strength": strength})
        surrogate = erase_finetune(surrogate_net, erasure, ctx.schedule)
        rows.append(_row(ctx.run(ctx.attack, surrogate=surrogate), surrogate_strength=strength,
                         surrogate_id=surrogate.model_id))
    return _finish("surrogate", rows, out_dir)


def prior_knowledge_study(ctx: StudyContext, out_dir: Optional[str] = None,
                          trainer: Optional[Callable] = None) -> pd.DataFrame:
    """
    A model trained without ever seeing the target concept (its id stays in the vocabulary)
    cannot be attacked into producing it; the regular victim is the reference row.
    """
    withheld = ctx.extras.get("withheld_model")
    if withheld is None:
        trainer = trainer or train_epsilon_net
        cfg = ctx.config
        dataset = make_mixture_dataset(cfg.mixture, seed=cfg.training.seed, exclude=[ctx.concept])
        withheld = trainer(dataset, ctx.schedule, cfg.training, concepts=cfg.mixture.concepts)
        withheld.model_id = f"withheld:{ctx.concept}"
    victim = withheld if hasattr(withheld, "erasure") else wrap_base(withheld)
    rows = [_row(ctx.run(ctx.attack), victim="erased", victim_id=getattr(ctx.victim, "model_id", "victim")),
            _row(ctx.run(ctx.attack, victim=victim), victim="never_trained", victim_id=victim.model_id)]
    return _finish("prior_knowledge", rows, out_dir)


def diversity_study(ctx: StudyContext, out_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Similarity of attack outputs to the inverted reference against two baselines without the
    attack: plain reconstruction of the reference, and reconstruction from the same jittered
    latents the attack starts from. Per-sample values go to diversity_similarities.csv.
    """
    x_ref = ctx.references[ctx.concept][0]
    report = ctx.run(ctx.attack)
    n = ctx.attacks
    groups = {
        "attack": report.similarities,
        "reconstruction": reconstruction_similarity(ctx.surrogate, x_ref, ctx.concept, n, ctx.attack,
                                                    ctx.detector, ctx.schedule),
        "jittered_reconstruction": reconstruction_similarity(ctx.surrogate, x_ref, ctx.concept, n, ctx.attack,
                                                             ctx.detector, ctx.schedule,
                                                             jitter=ctx.attack.init_jitter),
    }
    rows = [{"variant": name, "n": len(values),
             "mean_similarity": float(np.mean(values)) if values else np.nan,
             "asr": report.asr if name == "attack" else np.nan}
            for name, values in groups.items()]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        samples = pd.DataFrame([{"variant": name, "similarity": v} for name, values in groups.items() for v in values],
                               columns=["variant", "similarity"])
        write_csv(samples, os.path.join(out_dir, "diversity_similarities.csv"))
    return _finish("diversity", rows, out_dir)


@torch.no_grad()
def naive_attack_asr(victim, concept: str, detector: DetectorSpec, cfg: AttackConfig, budget: int,
                     n_attacks: int, schedule: NoiseSchedule) -> float:
    """ An attack succeeds when any of `budget` seeded Gaussian latents generates the concept """
    steps = default_steps(schedule, cfg.n_inference_steps)
    wins = 0
    for i in range(n_attacks):
        gen = torch.Generator().manual_seed(cfg.seed + i)
        z = torch.randn(budget, victim.data_dim, generator=gen, dtype=DTYPE)
        samples, _ = ddim_sample(victim, z, GuidanceSpec(cfg.guide_scale, concept), steps, schedule)
        wins += concept in detect_batch(detector, samples.numpy())
    return wins / n_attacks


def _filled_pool(ctx: StudyContext, size: int, seed: int) -> LatentPool:
    """ Pool holding up to `size` successful latents from fresh attacks """
    pool = LatentPool(data_dim=ctx.victim.data_dim, concepts=ctx.victim.concepts)
    cfg = ctx.attack.model_copy(update={"seed": seed})
    ctx.run(cfg, pool=pool, n_attacks=size)
    if not len(pool):
        logging.warning(f"[POOL] no successful latents out of {size} fresh attacks")
    return pool


def _subpool(pool: LatentPool, size: int) -> LatentPool:
    small = LatentPool(data_dim=pool.data_dim, concepts=pool.concepts)
    for entry in pool.entries[:size]:
        small.store(entry)
    return small


def sampling_budget_study(ctx: StudyContext, out_dir: Optional[str] = None,
                          budgets: Sequence[int] = (1, 5, 10, 20, 40),
                          pool: Optional[LatentPool] = None) -> pd.DataFrame:
    """ Naive attack with k generations against pool reuse with k draws and no fallback """
    pool = pool if pool is not None else _filled_pool(ctx, max(ctx.config.harness.pool_sizes), ctx.attack.seed + 10_000)
    cfg = ctx.attack.model_copy(update={"allow_fallback": False})
    rows = []
    for k in budgets:
        naive = naive_attack_asr(ctx.victim, ctx.concept, ctx.detector, cfg, k, ctx.attacks, ctx.schedule)
        reuse = ctx.run(cfg, mode="reuse", pool=pool, budget=k) if len(pool) else None
        rows.append({"budget": k, "naive_asr": naive,
                     "reuse_asr": reuse.asr if reuse else np.nan,
                     "reuse_mean_iterations": reuse.mean_iterations if reuse else np.nan})
    return _finish("sampling_budget", rows, out_dir)


def pool_size_study(ctx: StudyContext, out_dir: Optional[str] = None, repetitions: int = 3,
                    budget: Optional[int] = None) -> pd.DataFrame:
    """ Reuse ASR as the pool grows; each repetition fills a fresh pool from its own seeds """
    sizes = sorted(ctx.config.harness.pool_sizes)
    budget = budget or ctx.config.harness.reuse_budget
    cfg = ctx.attack.model_copy(update={"allow_fallback": False})
    rows = []
    for rep in range(repetitions):
        full = _filled_pool(ctx, sizes[-1], ctx.attack.seed + 10_000 * (rep + 1))
        for size in sizes:
            pool = _subpool(full, size)
            if not len(pool):
                rows.append({"repetition": rep, "pool_size": size, "entries": 0, "asr": np.nan,
                             "mean_iterations": np.nan})
                continue
            run_cfg = cfg.model_copy(update={"seed": cfg.seed + rep * ctx.attacks})
            report = ctx.run(run_cfg, mode="reuse", pool=pool, budget=budget)
            rows.append({"repetition": rep, "pool_size": size, "entries": len(pool), "asr": report.asr,
                         "mean_iterations": report.mean_iterations})
    return _finish("pool_size", rows, out_dir)


STUDIES: Dict[str, Callable[..., pd.DataFrame]] = {
    "loss": loss_study,
    "latent_type": latent_type_study,
    "timestep": timestep_study,
    "metric_grid": metric_grid_study,
    "chain_carrier": chain_carrier_study,
    "surrogate": surrogate_study,
    "prior_knowledge": prior_knowledge_study,
    "diversity": diversity_study,
    "sampling_budget": sampling_budget_study,
    "pool_size": pool_size_study,
}


def run_study(name: str, ctx: StudyContext, out_dir: Optional[str] = None) -> pd.DataFrame:
    try:
        study = STUDIES[name]
    except KeyError:
        raise ValueError(f"unknown study {name!r}; choose from {sorted(STUDIES)}") from None
    return study(ctx, out_dir)
