"""
Victim models: two toy concept-erasure families with a strength knob.

finetune_erase   - weight editing: the target concept's conditional prediction is regressed
                   toward a negatively guided frozen copy of the base; other concepts stay
                   close to the base.
guidance_erase   - inference-time rule: the guided prediction for the erased concept has
                   strength * (cond - uncond) subtracted; no parameter changes.
"""
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F

from model_inference.diffusion_core import (
    DTYPE, EpsilonNet, GuidanceSpec, NoiseSchedule, TrainingDivergedError, UnknownConceptError,
    checkpoint_payload, clone_net, ddim_sample, default_steps, model_from_payload)
from schema.config import ErasureConfig
from schema.records import DetectorSpec
from utils.detector import detect_batch, success_rate


@dataclass(frozen=True)
class GuidanceGuard:
    """ Negative guidance applied when the requested condition is the erased concept """
    target_concept: str
    strength: float

    def to_dict(self) -> Dict[str, float]:
        return {"target_concept": self.target_concept, "strength": self.strength}


class UnlearnedModel:
    """ A victim: an epsilon net, an optional inference-time guard and its erasure metadata """

    def __init__(self, net: EpsilonNet, erasure: Optional[ErasureConfig] = None,
                 guard: Optional[GuidanceGuard] = None, base_ref: str = "", model_id: Optional[str] = None):
        self.net = net
        self.erasure = erasure
        self.guard = guard
        self.base_ref = base_ref or net.model_id
        if model_id is None:
            model_id = self.base_ref if erasure is None else \
                f"{self.base_ref}:{erasure.method}:{erasure.target_concept}:{erasure.strength:g}"
        self.model_id = model_id

    @property
    def concepts(self) -> List[str]:
        return self.net.concepts

    @property
    def data_dim(self) -> int:
        return self.net.data_dim

    def concept_index(self, concept: Optional[str]) -> int:
        return self.net.concept_index(concept)

    def predict(self, z_t: torch.Tensor, t: int, condition: Optional[str]) -> torch.Tensor:
        return self.net.predict(z_t, t, condition)

    def guided_noise(self, z_t: torch.Tensor, t: int, guide: GuidanceSpec) -> torch.Tensor:
        guarded = (self.guard is not None and self.guard.strength != 0
                   and guide.condition == self.guard.target_concept)
        if not guarded:
            return self.net.guided_noise(z_t, t, guide)
        uncond = self.net.predict(z_t, t, None)
        cond = self.net.predict(z_t, t, guide.condition)
        direction = cond - uncond
        return uncond + guide.scale * direction - self.guard.strength * direction

    def erasure_block(self) -> Optional[dict]:
        if self.erasure is None:
            return None
        block = self.erasure.model_dump()
        block["guard"] = self.guard.to_dict() if self.guard else None
        block["base_ref"] = self.base_ref
        return block


def wrap_base(base: EpsilonNet) -> UnlearnedModel:
    """ Identity victim: the base model with nothing erased """
    return UnlearnedModel(base, base_ref=base.model_id)


def _check_target(base: EpsilonNet, cfg: ErasureConfig, method: str):
    if cfg.method != method:
        raise ValueError(f"expected method {method!r}, got {cfg.method!r}")
    if cfg.target_concept not in base.concepts:
        raise UnknownConceptError(f"unknown concept {cfg.target_concept!r}; vocabulary is {base.concepts}")


@torch.no_grad()
def _trajectory_bank(frozen: EpsilonNet, concept: Optional[str], cfg: ErasureConfig,
                     schedule: NoiseSchedule, gen: torch.Generator):
    """ (z_t, t) pairs visited by the frozen model while generating `concept` """
    z_init = torch.randn(cfg.bank_latents, frozen.data_dim, generator=gen, dtype=DTYPE)
    steps = default_steps(schedule)
    _, traj = ddim_sample(frozen, z_init, GuidanceSpec(cfg.bank_guide_scale, concept), steps, schedule)
    latents = torch.cat(traj.latents[:-1])
    timesteps = torch.tensor(steps, dtype=torch.long).repeat_interleave(cfg.bank_latents)
    return latents, timesteps


def erase_finetune(base: EpsilonNet, cfg: ErasureConfig, schedule: NoiseSchedule) -> UnlearnedModel:
    """
    Fine-tune a copy so eps*(z_t, c*, t) -> eps0(z_t, null, t) - eta * (eps0(z_t, c*, t) - eps0(z_t, null, t)),
    with non-target concepts (and the null branch) regressed onto the frozen base.
    round(strength * steps_per_strength) optimizer steps are taken.
    """
    _check_target(base, cfg, "finetune_erase")
    student = clone_net(base)
    n_steps = int(round(cfg.strength * cfg.steps_per_strength))
    if n_steps == 0:
        return UnlearnedModel(student, erasure=cfg, base_ref=base.model_id)

    frozen = base
    gen = torch.Generator().manual_seed(cfg.seed)
    target_idx = base.concept_index(cfg.target_concept)
    target_z, target_t = _trajectory_bank(frozen, cfg.target_concept, cfg, schedule, gen)
    keep = [c for c in base.concepts if c != cfg.target_concept]
    keep_banks = [_trajectory_bank(frozen, c, cfg, schedule, gen) for c in keep]
    keep_z = torch.cat([b[0] for b in keep_banks] + [target_z])
    keep_t = torch.cat([b[1] for b in keep_banks] + [target_t])
    keep_c = torch.cat([torch.full((len(b[0]),), base.concept_index(c), dtype=torch.long)
                        for c, b in zip(keep, keep_banks)] + [torch.zeros(len(target_z), dtype=torch.long)])

    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate)
    start = time.time()
    logging.info(f"[ERASE] fine-tune erasing {cfg.target_concept!r}: {n_steps} steps, eta={cfg.eta}")
    for step in range(1, n_steps + 1):
        pick = torch.randint(len(target_z), (cfg.batch_size,), generator=gen)
        z, t = target_z[pick], target_t[pick]
        c_star = torch.full((len(pick),), target_idx, dtype=torch.long)
        with torch.no_grad():
            e_uncond = frozen(z, t, torch.zeros_like(c_star))
            e_cond = frozen(z, t, c_star)
            erase_target = e_uncond - cfg.eta * (e_cond - e_uncond)
        loss = F.mse_loss(student(z, t, c_star), erase_target)

        if cfg.retention_weight > 0 and len(keep_z):
            pick_r = torch.randint(len(keep_z), (cfg.batch_size,), generator=gen)
            z_r, t_r, c_r = keep_z[pick_r], keep_t[pick_r], keep_c[pick_r]
            with torch.no_grad():
                e_keep = frozen(z_r, t_r, c_r)
            loss = loss + cfg.retention_weight * F.mse_loss(student(z_r, t_r, c_r), e_keep)

        if not torch.isfinite(loss):
            logging.error(f"[ERASE] loss became {loss.item()} at step {step}; aborting")
            raise TrainingDivergedError(f"erasure fine-tune diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    logging.info("[TIME] - erasure fine-tune takes {:.2f} seconds".format(time.time() - start))
    victim = UnlearnedModel(student, erasure=cfg, base_ref=base.model_id)
    student.model_id = victim.model_id
    return victim


def erase_guidance(base: EpsilonNet, cfg: ErasureConfig) -> UnlearnedModel:
    """ Base net unchanged plus a negative-guidance guard on the target concept """
    _check_target(base, cfg, "guidance_erase")
    return UnlearnedModel(base, erasure=cfg, guard=GuidanceGuard(cfg.target_concept, cfg.strength),
                          base_ref=base.model_id)


def erase(base: EpsilonNet, cfg: ErasureConfig, schedule: NoiseSchedule) -> UnlearnedModel:
    if cfg.method == "finetune_erase":
        return erase_finetune(base, cfg, schedule)
    return erase_guidance(base, cfg)


@torch.no_grad()
def naive_asr(victim, concept: str, detector: DetectorSpec, n: int, guide_scale: float,
              schedule: NoiseSchedule, seed: int = 0, steps: Optional[List[int]] = None) -> float:
    """ Fraction of n Gaussian latents that the victim, prompted with `concept`, turns into `concept` """
    if n < 1:
        raise ValueError(f"naive_asr needs n >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    z_init = torch.randn(n, victim.data_dim, generator=gen, dtype=DTYPE)
    steps = steps or default_steps(schedule)
    samples, _ = ddim_sample(victim, z_init, GuidanceSpec(guide_scale, concept), steps, schedule)
    return success_rate(detect_batch(detector, samples.numpy()), concept)


# region victim checkpoint
def save_victim(victim: UnlearnedModel, schedule: NoiseSchedule, path: str) -> str:
    """ Base checkpoint format plus an erasure metadata block """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = checkpoint_payload(victim.net, schedule)
    payload["erasure"] = victim.erasure_block()
    payload["victim_id"] = victim.model_id
    payload["base_ref"] = victim.base_ref
    torch.save(payload, path)
    logging.info(f"[CKPT] saved victim {victim.model_id} to {path}")
    return path


def load_victim(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Victim checkpoint not found at: {path}")
    payload = torch.load(path, map_location="cpu")
    net, schedule = model_from_payload(payload)
    block = payload.get("erasure")
    erasure = guard = None
    if block:
        guard_block = block.pop("guard", None)
        block.pop("base_ref", None)
        erasure = ErasureConfig(**block)
        if guard_block:
            guard = GuidanceGuard(guard_block["target_concept"], guard_block["strength"])
    victim = UnlearnedModel(net, erasure=erasure, guard=guard, base_ref=payload.get("base_ref", ""),
                            model_id=payload.get("victim_id"))
    return victim, schedule
# endregion
