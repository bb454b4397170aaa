"""
IVO: initial latent variable optimization against an unlearned victim.

Stage 1  invert a reference sample with the surrogate (null condition) into an initial latent.
Stage 2  carry the latent down to the loss step, compare the victim's guided noise with the
         surrogate's conditional (DML) and unconditional (DCL) noise there, and descend on the
         latent; stop as soon as the full victim generation is detected as the target concept.
Stage 3  store successful latents in a pool and replay them without optimization.
"""
import logging
import time
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from model_inference.diffusion_core import (
    DTYPE, GuidanceSpec, NoiseSchedule, NonFiniteValueError, UnknownConceptError,
    ddim_invert, ddim_sample, default_steps, denoise_to, latent_gradient)
from model_inference.latent_pool import EmptyPoolError, LatentPool, now_iso, pool_sample, pool_store
from schema.config import AttackConfig
from schema.records import AttackResult, DetectorSpec, PoolEntry
from utils.detector import detect, distance_to_concept
from utils.metrics import distance


def dual_loss(victim_eps: torch.Tensor, surrogate_cond_eps: torch.Tensor, surrogate_uncond_eps: torch.Tensor,
              cfg: AttackConfig) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """ (L_overall, L_DML, L_DCL) with L_overall = w_dcl * L_DCL + w_dml * L_DML """
    for name, v in (("victim_eps", victim_eps), ("surrogate_cond_eps", surrogate_cond_eps),
                    ("surrogate_uncond_eps", surrogate_uncond_eps)):
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteValueError(f"{name} is not finite")
    if not (victim_eps.shape == surrogate_cond_eps.shape == surrogate_uncond_eps.shape):
        raise ValueError("noise vectors must share one shape")
    l_dml = distance(cfg.dml_metric, surrogate_cond_eps, victim_eps)
    l_dcl = distance(cfg.dcl_metric, surrogate_uncond_eps, victim_eps)
    return cfg.dcl_weight * l_dcl + cfg.dml_weight * l_dml, l_dml, l_dcl


def _check_vocab(concept: str, *models):
    for model in models:
        if concept not in model.concepts:
            raise UnknownConceptError(f"concept {concept!r} not in vocabulary of {getattr(model, 'model_id', model)}")


def _steps_for(cfg: AttackConfig, schedule: NoiseSchedule, steps: Optional[Sequence[int]]):
    steps = list(steps) if steps is not None else default_steps(schedule, cfg.n_inference_steps)
    if not 1 <= cfg.loss_step_index <= len(steps):
        raise ValueError(f"loss_step_index {cfg.loss_step_index} outside [1, {len(steps)}]")
    return steps


def _make_optimizer(param: torch.Tensor, cfg: AttackConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD([param], lr=cfg.learning_rate)
    if cfg.optimizer == "momentum":
        return torch.optim.SGD([param], lr=cfg.learning_rate, momentum=cfg.momentum)
    return torch.optim.Adam([param], lr=cfg.learning_rate)


def invert_reference(surrogate, x_ref, schedule: NoiseSchedule, steps: Optional[Sequence[int]] = None) -> torch.Tensor:
    """ Stage 1: unconditional DDIM inversion of a reference sample on the surrogate """
    steps = list(steps) if steps is not None else list(reversed(default_steps(schedule)))
    with torch.no_grad():
        return ddim_invert(surrogate, torch.as_tensor(x_ref, dtype=DTYPE), GuidanceSpec(0.0, None), steps, schedule)


def initial_latent(data_dim: int, seed: int, inverted: Optional[torch.Tensor] = None, jitter: float = 0.0) -> torch.Tensor:
    """ Gaussian latent, or an inverted latent plus seeded Gaussian jitter """
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(data_dim, generator=gen, dtype=DTYPE)
    if inverted is None:
        return noise
    return inverted.detach().clone() + jitter * noise


@torch.no_grad()
def generate(victim, z: torch.Tensor, concept: str, cfg: AttackConfig, schedule: NoiseSchedule,
             steps: Sequence[int]) -> torch.Tensor:
    sample, _ = ddim_sample(victim, z.detach(), GuidanceSpec(cfg.guide_scale, concept), steps, schedule)
    return sample


def attack_loss_fn(victim, surrogate, concept: str, cfg: AttackConfig, schedule: NoiseSchedule,
                   steps: Sequence[int]):
    """
    Map z_T -> (L_overall, L_DML, L_DCL). The chain visits steps[0] .. t* only; nothing below
    the loss step is evaluated.
    """
    chain = list(steps[:cfg.loss_step_index])
    t_star = chain[-1]
    carrier = victim if cfg.chain_model == "victim" else surrogate
    guide = GuidanceSpec(cfg.guide_scale, concept)

    def loss_terms(z: torch.Tensor):
        z_t = denoise_to(carrier, z, guide, chain, schedule)
        victim_eps = victim.guided_noise(z_t, t_star, guide)
        cond_eps = surrogate.predict(z_t, t_star, concept)
        uncond_eps = surrogate.predict(z_t, t_star, None)
        return dual_loss(victim_eps, cond_eps, uncond_eps, cfg)

    return loss_terms, t_star


def optimize_latent(victim, surrogate, z_init, concept: str, detector: DetectorSpec, cfg: AttackConfig,
                    schedule: NoiseSchedule, steps: Optional[Sequence[int]] = None,
                    init_kind: str = "gaussian") -> AttackResult:
    """ Stage 2: descend on the initial latent until the victim generates `concept` or max_iters runs out """
    _check_vocab(concept, victim, surrogate)
    z_init = torch.as_tensor(z_init, dtype=DTYPE)
    if z_init.shape != (victim.data_dim,):
        raise ValueError(f"z_init must have shape ({victim.data_dim},), got {tuple(z_init.shape)}")
    steps = _steps_for(cfg, schedule, steps)
    loss_terms, t_star = attack_loss_fn(victim, surrogate, concept, cfg, schedule, steps)

    z = z_init.detach().clone().requires_grad_(True)
    optimizer = _make_optimizer(z, cfg)
    trace = []
    start = time.time()

    def check():
        sample = generate(victim, z, concept, cfg, schedule, steps)
        return sample, detect(detector, sample.numpy())

    sample, verdict = check()
    iterations = 0
    while verdict != concept and iterations < cfg.max_iters:
        terms = {}

        def overall(latent):
            terms["value"] = loss_terms(latent)
            return terms["value"][0]

        try:
            grad = latent_gradient(overall, z)
        except NonFiniteValueError:
            logging.error(f"[ATTACK] non-finite loss/gradient at iteration {iterations + 1} "
                          f"(concept {concept!r}, victim {getattr(victim, 'model_id', '?')}); aborting")
            raise
        trace.append(tuple(float(v.detach()) for v in terms["value"]))
        optimizer.zero_grad()
        z.grad = grad
        optimizer.step()
        iterations += 1
        if iterations % cfg.success_check_every == 0 or iterations == cfg.max_iters:
            sample, verdict = check()

    logging.debug("[ATTACK] {} after {} iterations in {:.2f}s (t*={})".format(
        "success" if verdict == concept else "failure", iterations, time.time() - start, t_star))
    return AttackResult(
        success=verdict == concept,
        final_latent=z.detach().tolist(),
        iterations=iterations,
        loss_trace=trace,
        generated_sample=sample.tolist(),
        detector_verdict=verdict,
        target_concept=concept,
        seed=cfg.seed,
        init_kind=init_kind,
        loss_timestep=t_star,
        chain_model=cfg.chain_model,
    )


def entry_from_result(result: AttackResult, victim_id: str) -> PoolEntry:
    return PoolEntry(
        latent=result.final_latent,
        concept=result.target_concept,
        victim_id=victim_id,
        iterations_used=result.iterations,
        created_at=now_iso(),
        success_metrics={"detector_verdict": result.detector_verdict,
                         "generated_sample": result.generated_sample},
    )


def reused_attack(victim, pool: LatentPool, concept: str, detector: DetectorSpec, cfg: AttackConfig,
                  budget: int, schedule: NoiseSchedule, surrogate=None,
                  rng: Optional[np.random.Generator] = None,
                  steps: Optional[Sequence[int]] = None) -> AttackResult:
    """
    Stage 3: replay up to `budget` pool latents directly on the victim. If all fail and fallback
    is allowed, optimize from the draw whose output landed closest to the concept.
    Reported iterations count optimizer steps only.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    _check_vocab(concept, victim)
    steps = _steps_for(cfg, schedule, steps)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    can_fallback = cfg.allow_fallback and surrogate is not None

    if not pool.candidates(concept, cfg.pool_policy):
        if not can_fallback:
            raise EmptyPoolError(f"pool has no candidates for {concept!r} and fallback is disabled")
        logging.info(f"[ATTACK] pool empty for {concept!r}; optimizing from a Gaussian latent")
        return optimize_latent(victim, surrogate, initial_latent(victim.data_dim, cfg.seed), concept,
                               detector, cfg, schedule, steps, init_kind="gaussian")

    best, best_score, best_sample = None, np.inf, None
    for draw in range(1, budget + 1):
        entry = pool_sample(pool, concept, cfg.pool_policy, rng)
        z = torch.tensor(entry.latent, dtype=DTYPE)
        sample = generate(victim, z, concept, cfg, schedule, steps)
        verdict = detect(detector, sample.numpy())
        if verdict == concept:
            return AttackResult(success=True, final_latent=entry.latent, iterations=0,
                                generated_sample=sample.tolist(), detector_verdict=verdict,
                                target_concept=concept, seed=cfg.seed, init_kind="pool",
                                chain_model=cfg.chain_model, pool_draws=draw)
        score = float(distance_to_concept(detector, sample.numpy(), concept)[0])
        if score < best_score:
            best, best_score, best_sample = entry, score, (sample, verdict)

    if not can_fallback:
        sample, verdict = best_sample
        return AttackResult(success=False, final_latent=best.latent, iterations=0,
                            generated_sample=sample.tolist(), detector_verdict=verdict,
                            target_concept=concept, seed=cfg.seed, init_kind="pool",
                            chain_model=cfg.chain_model, pool_draws=budget)
    result = optimize_latent(victim, surrogate, torch.tensor(best.latent, dtype=DTYPE), concept, detector,
                             cfg, schedule, steps, init_kind="pool")
    return result.model_copy(update={"pool_draws": budget})


def store_if_successful(pool: Optional[LatentPool], result: AttackResult, victim_id: str) -> bool:
    """ Store a successful latent once; a rerun with the same seed finds it already there """
    if pool is None or not result.success:
        return False
    return pool.store_new(entry_from_result(result, victim_id))


__all__ = ["dual_loss", "optimize_latent", "reused_attack", "invert_reference", "initial_latent",
           "pool_store", "pool_sample", "EmptyPoolError", "LatentPool"]
