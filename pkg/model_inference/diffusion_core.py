"""
Toy conditional diffusion model in data space (latent space == data space).

Holds the linear noise schedule, the conditional epsilon network, classifier-free
guidance, the deterministic DDIM update (eta = 0, alpha_bar_0 := 1), DDIM sampling
and inversion, and exact reverse-mode gradients with respect to the initial latent.
Everything runs in float64 so that gradients can be checked against finite
differences.
"""
import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from schema.config import DiffusionConfig, MixtureConfig, TrainingConfig
from schema.records import CHECKPOINT_FORMAT_VERSION

DTYPE = torch.float64
Timestep = Union[int, torch.Tensor]


class UnknownConceptError(KeyError):
    """ Concept identifier outside the model vocabulary """


class TrainingError(RuntimeError):
    """ Training finished but the model does not meet its quality bar """


class TrainingDivergedError(TrainingError):
    """ Training loss became non-finite """


class NonFiniteValueError(FloatingPointError):
    """ A loss or gradient that must be finite is not """


# region schedule
@dataclass(frozen=True)
class NoiseSchedule:
    """ Per-timestep beta, alpha and cumulative alpha_bar for t = 1..T """
    T: int
    beta_min: float
    beta_max: float
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t: Timestep) -> torch.Tensor:
        """ alpha_bar at t (int or LongTensor); t = 0 maps to 1 """
        padded = torch.cat([torch.ones(1, dtype=DTYPE), self.alpha_bars])
        if isinstance(t, torch.Tensor):
            if t.numel() and (int(t.min()) < 0 or int(t.max()) > self.T):
                raise ValueError(f"timesteps must lie in [0, {self.T}]")
            return padded[t.long()]
        if not 0 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return padded[int(t)]

    def to_dict(self) -> Dict[str, float]:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """ Linear beta schedule from beta_min to beta_max inclusive """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    for name, value in (("beta_min", beta_min), ("beta_max", beta_max)):
        if not math.isfinite(value) or not 0 < value < 1:
            raise ValueError(f"{name} must be finite and in (0, 1), got {value!r}")
    if beta_min > beta_max:
        raise ValueError(f"beta_min {beta_min} > beta_max {beta_max}")

    betas = torch.linspace(beta_min, beta_max, int(T), dtype=DTYPE)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    assert bool(torch.all(alpha_bars[1:] < alpha_bars[:-1])), "alpha_bar must be strictly decreasing"
    return NoiseSchedule(int(T), float(beta_min), float(beta_max), betas, alphas, alpha_bars)


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


def default_steps(schedule: NoiseSchedule, n_steps: Optional[int] = None) -> List[int]:
    """ Strictly decreasing denoising step list ending at 1 (the last transition targets 0) """
    n_steps = schedule.T if n_steps is None else n_steps
    if not 1 <= n_steps <= schedule.T:
        raise ValueError(f"n_steps must be in [1, {schedule.T}], got {n_steps}")
    grid = np.linspace(schedule.T, 1, n_steps).round().astype(int)
    return [int(t) for t in grid]
# endregion


def forward_diffuse(z0: torch.Tensor, t: Timestep, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """ q-sample: sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise """
    if isinstance(t, torch.Tensor):
        if t.numel() and int(t.min()) < 1:
            raise ValueError("forward_diffuse needs t >= 1")
        ab = schedule.alpha_bar(t).unsqueeze(-1)
    else:
        if not 1 <= int(t) <= schedule.T:
            raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
        ab = schedule.alpha_bar(int(t))
    noise = torch.as_tensor(noise, dtype=DTYPE)
    if not bool(torch.isfinite(noise).all()):
        raise ValueError("noise must be finite")
    return ab.sqrt() * torch.as_tensor(z0, dtype=DTYPE) + (1.0 - ab).sqrt() * noise


# region network
def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


@dataclass(frozen=True)
class GuidanceSpec:
    """ Classifier-free guidance: scale lambda and a concept (None is the null condition) """
    scale: float
    condition: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")


class EpsilonNet(nn.Module):
    """
    Conditional noise predictor eps(z_t, t, c).
    Input is concat(z, sinusoidal time embedding, learned concept embedding); two hidden
    SiLU layers. Index 0 of the concept embedding is the null condition.
    """

    def __init__(self, data_dim: int, concepts: Sequence[str], hidden_width: int = 128,
                 time_embedding_dim: int = 32, concept_embedding_dim: int = 16):
        super().__init__()
        if len(set(concepts)) != len(concepts):
            raise ValueError("concept vocabulary contains duplicates")
        self.data_dim = int(data_dim)
        self.concepts = list(concepts)
        self.hidden_width = int(hidden_width)
        self.time_embedding_dim = int(time_embedding_dim)
        self.concept_embedding_dim = int(concept_embedding_dim)
        self.model_id = "epsilon-net"
        self.concept_embedding = nn.Embedding(len(self.concepts) + 1, self.concept_embedding_dim)
        self.net = nn.Sequential(
            nn.Linear(self.data_dim + self.time_embedding_dim + self.concept_embedding_dim, self.hidden_width),
            nn.SiLU(),
            nn.Linear(self.hidden_width, self.hidden_width),
            nn.SiLU(),
            nn.Linear(self.hidden_width, self.data_dim),
        )
        self.to(DTYPE)

    def concept_index(self, concept: Optional[str]) -> int:
        if concept is None:
            return 0
        try:
            return self.concepts.index(concept) + 1
        except ValueError:
            raise UnknownConceptError(f"unknown concept {concept!r}; vocabulary is {self.concepts}") from None

    def forward(self, z: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, sinusoidal_embedding(t, self.time_embedding_dim), self.concept_embedding(c)], dim=-1)
        return self.net(h)

    def predict(self, z_t: torch.Tensor, t: int, condition: Optional[str]) -> torch.Tensor:
        """ eps for a single (D,) latent or a (B, D) batch at one timestep """
        z_t = torch.as_tensor(z_t, dtype=DTYPE)
        single = z_t.dim() == 1
        z = z_t.unsqueeze(0) if single else z_t
        batch = z.shape[0]
        t_vec = torch.full((batch,), int(t), dtype=torch.long)
        c_vec = torch.full((batch,), self.concept_index(condition), dtype=torch.long)
        out = self.forward(z, t_vec, c_vec)
        return out.squeeze(0) if single else out

    def guided_noise(self, z_t: torch.Tensor, t: int, guide: GuidanceSpec) -> torch.Tensor:
        uncond = self.predict(z_t, t, None)
        if guide.condition is None or guide.scale == 0:
            return uncond
        cond = self.predict(z_t, t, guide.condition)
        if guide.scale == 1:
            return cond
        return uncond + guide.scale * (cond - uncond)

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def zero_predictor(data_dim: int, concepts: Sequence[str], **kwargs) -> EpsilonNet:
    """ Degenerate net whose prediction is identically zero """
    model = EpsilonNet(data_dim, concepts, **kwargs)
    with torch.no_grad():
        last = model.net[-1]
        last.weight.zero_()
        last.bias.zero_()
    return model


def build_epsilon_net(data_dim: int, concepts: Sequence[str], hyper: TrainingConfig) -> EpsilonNet:
    """ Seeded initialisation that leaves the global torch RNG untouched """
    with torch.random.fork_rng():
        torch.manual_seed(hyper.seed)
        return EpsilonNet(data_dim, concepts, hidden_width=hyper.hidden_width,
                          time_embedding_dim=hyper.time_embedding_dim,
                          concept_embedding_dim=hyper.concept_embedding_dim)
# endregion


def guided_noise(model, z_t: torch.Tensor, t: int, guide: GuidanceSpec) -> torch.Tensor:
    """
    uncond + lambda * (cond - uncond). `model` is an EpsilonNet or anything exposing
    guided_noise (an unlearned victim applies its guard there).
    """
    if guide.condition is not None:
        model.concept_index(guide.condition)
    return model.guided_noise(z_t, t, guide)


# region dataset & training
@dataclass
class ConceptDataset:
    """ Points of dimension D with concept labels, plus the generating mixture """
    points: torch.Tensor
    labels: List[str]
    mixture_spec: Dict[str, Tuple[List[float], float]]

    def __post_init__(self):
        self.points = torch.as_tensor(self.points, dtype=DTYPE)
        if self.points.dim() != 2 or self.points.shape[0] != len(self.labels):
            raise ValueError("points must be (N, D) with one label per point")
        missing = set(self.labels) - set(self.mixture_spec)
        if missing:
            raise ValueError(f"labels missing from mixture_spec: {sorted(missing)}")
        if not bool(torch.isfinite(self.points).all()):
            raise ValueError("dataset points must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def concepts(self) -> List[str]:
        return list(self.mixture_spec)

    def samples_of(self, concept: str) -> torch.Tensor:
        idx = [i for i, label in enumerate(self.labels) if label == concept]
        return self.points[idx]


def make_mixture_dataset(mixture: MixtureConfig, seed: int = 0, n_per_concept: Optional[int] = None,
                         exclude: Sequence[str] = ()) -> ConceptDataset:
    """ Sample the isotropic Gaussian mixture; `exclude` withholds concepts from the samples only """
    n = mixture.n_per_concept if n_per_concept is None else n_per_concept
    gen = torch.Generator().manual_seed(seed)
    spec = {c: (list(m), float(mixture.std)) for c, m in zip(mixture.concepts, mixture.means)}
    chunks, labels = [], []
    for concept, (mean, std) in spec.items():
        if concept in exclude:
            continue
        mean_t = torch.tensor(mean, dtype=DTYPE)
        chunks.append(mean_t + std * torch.randn(n, len(mean), generator=gen, dtype=DTYPE))
        labels += [concept] * n
    points = torch.cat(chunks) if chunks else torch.empty(0, len(mixture.means[0]), dtype=DTYPE)
    return ConceptDataset(points, labels, spec)


def train_epsilon_net(dataset: ConceptDataset, schedule: NoiseSchedule, hyper: TrainingConfig,
                      concepts: Optional[Sequence[str]] = None) -> EpsilonNet:
    """
    Fit eps(z_t, c, t) with the MSE noise-prediction loss. The condition is replaced by the
    null condition with probability `hyper.cond_dropout` so the unconditional branch is learned.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    vocab = list(concepts) if concepts is not None else dataset.concepts
    present = set(dataset.labels)
    for concept in present:
        if concept not in vocab:
            raise UnknownConceptError(f"dataset concept {concept!r} missing from vocabulary")
    if concepts is None and present != set(vocab):
        raise ValueError(f"every concept needs at least one sample; missing {sorted(set(vocab) - present)}")

    model = build_epsilon_net(dataset.points.shape[1], vocab, hyper)
    gen = torch.Generator().manual_seed(hyper.seed)
    n = len(dataset)
    labels = torch.tensor([model.concept_index(c) for c in dataset.labels], dtype=torch.long)
    n_heldout = int(n * hyper.heldout_fraction)
    if n_heldout == 0 or n - n_heldout < 1:
        train_idx = heldout_idx = torch.arange(n)
    else:
        perm = torch.randperm(n, generator=gen)
        heldout_idx, train_idx = perm[:n_heldout], perm[n_heldout:]

    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.learning_rate)
    start = time.time()
    running = 0.0
    for step in range(1, hyper.n_steps + 1):
        pick = train_idx[torch.randint(len(train_idx), (hyper.batch_size,), generator=gen)]
        x0, c = dataset.points[pick], labels[pick].clone()
        drop = torch.rand(len(pick), generator=gen, dtype=DTYPE) < hyper.cond_dropout
        c[drop] = 0
        t = torch.randint(1, schedule.T + 1, (len(pick),), generator=gen)
        noise = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
        z_t = forward_diffuse(x0, t, noise, schedule)
        loss = F.mse_loss(model(z_t, t, c), noise)
        if not torch.isfinite(loss):
            logging.error(f"[TRAIN] loss became {loss.item()} at step {step}; aborting")
            raise TrainingDivergedError(f"training diverged at step {step}: loss={loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        running += loss.item()
        if step % hyper.log_every == 0:
            logging.info(f"[TRAIN] step {step}/{hyper.n_steps} loss {running / hyper.log_every:.4f}")
            running = 0.0

    model.heldout_loss = heldout_loss(model, dataset.points[heldout_idx], labels[heldout_idx],
                                      schedule, seed=hyper.seed + 1)
    logging.info("[TIME] - training takes {:.2f} seconds, held-out loss {:.4f}".format(
        time.time() - start, model.heldout_loss))
    if hyper.heldout_loss_threshold is not None and model.heldout_loss > hyper.heldout_loss_threshold:
        raise TrainingError(f"held-out loss {model.heldout_loss:.4f} above threshold "
                            f"{hyper.heldout_loss_threshold}")
    return model


@torch.no_grad()
def heldout_loss(model: EpsilonNet, points: torch.Tensor, label_idx: torch.Tensor,
                 schedule: NoiseSchedule, seed: int = 0, repeats: int = 4) -> float:
    """ Empirical noise-prediction loss with fixed noise and timesteps """
    gen = torch.Generator().manual_seed(seed)
    x0 = points.repeat(repeats, 1)
    c = label_idx.repeat(repeats)
    t = torch.randint(1, schedule.T + 1, (len(x0),), generator=gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
    return F.mse_loss(model(forward_diffuse(x0, t, noise, schedule), t, c), noise).item()
# endregion


# region DDIM
@dataclass
class Trajectory:
    """ Latents at every visited step (plus the final z_0) and the noise predicted at each step """
    latents: List[torch.Tensor] = field(default_factory=list)
    noise_preds: List[torch.Tensor] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """
    Deterministic DDIM update from t to t_prev (either direction).
    z0_hat = (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t); out = sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev) eps
    """
    ab_t, ab_prev = schedule.alpha_bar(int(t)), schedule.alpha_bar(int(t_prev))
    if int(t) == int(t_prev) or bool(ab_t == ab_prev):
        return z_t
    z0_hat = (z_t - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()
    return ab_prev.sqrt() * z0_hat + (1.0 - ab_prev).sqrt() * eps


def _check_steps(steps: Sequence[int], schedule: NoiseSchedule, increasing: bool):
    if len(steps) == 0:
        raise ValueError("step list is empty")
    pairs = zip(steps[:-1], steps[1:])
    ordered = all(b > a for a, b in pairs) if increasing else all(b < a for a, b in pairs)
    if not ordered:
        raise ValueError(f"step list must be strictly {'increasing' if increasing else 'decreasing'}: {list(steps)}")
    if min(steps) < 1 or max(steps) > schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}]")


def denoise_to(model, z: torch.Tensor, guide: GuidanceSpec, steps: Sequence[int],
               schedule: NoiseSchedule) -> torch.Tensor:
    """
    Carry z from steps[0] down to steps[-1] (no transition below steps[-1]). Differentiable
    when z requires grad.
    """
    _check_steps(steps, schedule, increasing=False)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        z = ddim_step(z, guided_noise(model, z, t, guide), t, t_prev, schedule)
    return z


def ddim_sample(model, z_init: torch.Tensor, guide: GuidanceSpec, steps: Sequence[int],
                schedule: NoiseSchedule) -> Tuple[torch.Tensor, Trajectory]:
    """ Denoise z_init through `steps` and finally to 0, recording latents and noise predictions """
    _check_steps(steps, schedule, increasing=False)
    z = torch.as_tensor(z_init, dtype=DTYPE)
    traj = Trajectory(latents=[z.detach().clone()], steps=list(steps))
    targets = list(steps[1:]) + [0]
    for t, t_prev in zip(steps, targets):
        eps = guided_noise(model, z, t, guide)
        z = ddim_step(z, eps, t, t_prev, schedule)
        traj.noise_preds.append(eps.detach().clone())
        traj.latents.append(z.detach().clone())
    return z, traj


def ddim_invert(model, x: torch.Tensor, guide: GuidanceSpec, steps: Sequence[int],
                schedule: NoiseSchedule) -> torch.Tensor:
    """
    Run DDIM upwards from x (level 0) through the increasing `steps`. The noise for the
    transition into step t is predicted at the current latent with timestep t.
    """
    _check_steps(steps, schedule, increasing=True)
    z = torch.as_tensor(x, dtype=DTYPE)
    t_cur = 0
    for t_next in steps:
        eps = guided_noise(model, z, t_next, guide)
        z = ddim_step(z, eps, t_cur, t_next, schedule)
        t_cur = t_next
    return z


def latent_gradient(loss_fn: Callable[[torch.Tensor], torch.Tensor], z_init: torch.Tensor) -> torch.Tensor:
    """ d loss / d z_init by reverse-mode differentiation through whatever chain loss_fn builds """
    z = torch.as_tensor(z_init, dtype=DTYPE).detach().clone().requires_grad_(True)
    loss = loss_fn(z)
    loss = torch.as_tensor(loss, dtype=DTYPE)
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteValueError(f"loss is not finite: {loss.detach().tolist()}")
    if not loss.requires_grad:
        return torch.zeros_like(z)
    (grad,) = torch.autograd.grad(loss.sum(), z, allow_unused=True)
    if grad is None:
        return torch.zeros_like(z)
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteValueError(f"gradient is not finite: {grad.tolist()}")
    return grad
# endregion


# region checkpoint
def checkpoint_payload(model: EpsilonNet, schedule: NoiseSchedule) -> dict:
    state = model.state_dict()
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "data_dim": model.data_dim,
        "concepts": list(model.concepts),
        "hidden_width": model.hidden_width,
        "time_embedding_dim": model.time_embedding_dim,
        "concept_embedding_dim": model.concept_embedding_dim,
        "layer_shapes": {k: list(v.shape) for k, v in state.items()},
        "flat_params": {k: v.detach().reshape(-1).clone() for k, v in state.items()},
        "schedule": schedule.to_dict(),
        "model_id": model.model_id,
    }


def model_from_payload(payload: dict) -> Tuple[EpsilonNet, NoiseSchedule]:
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {payload.get('format_version')}")
    model = EpsilonNet(payload["data_dim"], payload["concepts"], payload["hidden_width"],
                       payload["time_embedding_dim"], payload["concept_embedding_dim"])
    state = {k: payload["flat_params"][k].reshape(shape) for k, shape in payload["layer_shapes"].items()}
    model.load_state_dict(state)
    model.model_id = payload.get("model_id", model.model_id)
    s = payload["schedule"]
    return model, make_linear_schedule(s["T"], s["beta_min"], s["beta_max"])


def save_checkpoint(model: EpsilonNet, schedule: NoiseSchedule, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(checkpoint_payload(model, schedule), path)
    logging.info(f"[CKPT] saved {model.model_id} to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[EpsilonNet, NoiseSchedule]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found at: {path}")
    return model_from_payload(torch.load(path, map_location="cpu"))


def clone_net(model: EpsilonNet) -> EpsilonNet:
    return copy.deepcopy(model)
# endregion
