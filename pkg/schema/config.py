""" Configuration file """
import json
import os
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

CONFIG_SCHEMA_VERSION = 1

DistanceMetric = Literal["cosine", "l1", "l2", "kl", "js"]


class DiffusionConfig(BaseSettings):
    """ Settings for the noise schedule and data space """
    model_config = SettingsConfigDict(env_prefix="IVO_DIFFUSION_")

    T: int = Field(100, ge=2, description="Number of diffusion timesteps")
    beta_min: float = Field(1e-4, gt=0, lt=1, description="First beta of the linear schedule")
    beta_max: float = Field(0.02, gt=0, lt=1, description="Last beta of the linear schedule")
    data_dim: int = Field(2, ge=1, description="Dimension D of data (= latent) space")


class TrainingConfig(BaseSettings):
    """ Settings for epsilon-net training """
    model_config = SettingsConfigDict(env_prefix="IVO_TRAINING_")

    n_steps: int = Field(6000, ge=1, description="Optimizer steps")
    batch_size: int = Field(256, ge=1, description="Mini-batch size")
    learning_rate: float = Field(1e-3, gt=0, description="Adam learning rate")
    cond_dropout: float = Field(0.1, ge=0, le=1, description="Probability of training with the null condition")
    heldout_fraction: float = Field(0.1, ge=0, lt=1, description="Fraction of samples held out for the loss check")
    heldout_loss_threshold: Optional[float] = Field(
        1.0, description="Abort when the held-out loss ends above this value (None disables)")
    hidden_width: int = Field(128, ge=1, description="Width of the two hidden layers")
    time_embedding_dim: int = Field(32, ge=2, description="Sinusoidal time embedding size (even)")
    concept_embedding_dim: int = Field(16, ge=1, description="Learned concept embedding size")
    seed: int = Field(0, description="Seed for init, batching and noise")
    log_every: int = Field(1000, ge=1, description="Log the running loss every n steps")

    @field_validator("time_embedding_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError(f"time_embedding_dim must be even, got {v}")
        return v


class MixtureConfig(BaseSettings):
    """ Toy concept mixture: one isotropic Gaussian component per concept """
    model_config = SettingsConfigDict(env_prefix="IVO_MIXTURE_")

    concepts: List[str] = Field(["nudity", "violence", "cat", "car"], description="Concept identifiers")
    means: List[List[float]] = Field([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
                                     description="Component mean per concept")
    std: float = Field(0.25, gt=0, description="Isotropic component standard deviation")
    n_per_concept: int = Field(1000, ge=1, description="Samples drawn per concept")

    @model_validator(mode="after")
    def _aligned(self):
        if len(self.concepts) != len(self.means):
            raise ValueError("concepts and means must have the same length")
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError("concept identifiers must be unique")
        return self


class ErasureConfig(BaseModel):
    """ Unlearning recipe: which family, which concept, how hard """
    method: Literal["finetune_erase", "guidance_erase"]
    target_concept: str
    strength: float = Field(1.0, ge=0, description="Fine-tune step scaler or negative-guidance scale")
    eta: float = Field(1.0, description="Erase-direction scale for finetune_erase")
    steps_per_strength: int = Field(2000, ge=0, description="Fine-tune steps at strength 1.0")
    learning_rate: float = Field(1e-4, gt=0, description="Fine-tune learning rate")
    retention_weight: float = Field(0.5, ge=0, description="Weight of the non-target retention term")
    batch_size: int = Field(256, ge=1)
    bank_latents: int = Field(256, ge=1, description="Frozen-base trajectories sampled per concept for the z_t bank")
    bank_guide_scale: float = Field(3.0, ge=0, description="Guidance scale used to sample the z_t bank")
    seed: int = 0


class AttackConfig(BaseSettings):
    """ IVO attack settings """
    model_config = SettingsConfigDict(env_prefix="IVO_ATTACK_")

    loss_step_index: int = Field(60, ge=1, description="1-based position in the inference step list where the loss is taken")
    n_inference_steps: int = Field(100, ge=1, description="Length of the denoising step list")
    max_iters: int = Field(50, ge=0, description="Optimizer iteration cap")
    learning_rate: float = Field(0.05, gt=0)
    optimizer: Literal["sgd", "momentum", "adam"] = Field("adam", description="plain GD, momentum GD or adaptive")
    momentum: float = Field(0.9, ge=0, lt=1)
    guide_scale: float = Field(3.0, ge=0, description="CFG scale for victim denoising")
    dml_metric: DistanceMetric = "cosine"
    dcl_metric: DistanceMetric = "l1"
    dml_weight: float = Field(1.0, ge=0)
    dcl_weight: float = Field(1.0, ge=0)
    success_check_every: int = Field(1, ge=1)
    chain_model: Literal["victim", "surrogate"] = Field(
        "victim", description="Model carrying the latent from T down to the loss step")
    init_jitter: float = Field(0.5, ge=0, description="Std of seeded jitter added to an inverted latent")
    allow_fallback: bool = Field(True, description="Reuse falls back to optimization when every draw fails")
    pool_policy: Literal["matching", "any"] = "matching"
    seed: int = 0


class ProfileSettings(BaseSettings):
    """ Discrepancy profile settings """
    model_config = SettingsConfigDict(env_prefix="IVO_PROFILE_")

    n_latents: int = Field(32, ge=2, description="Initial latents per concept")
    guide_scale: float = Field(3.0, ge=0)
    asr_samples: int = Field(200, ge=1, description="Draws for each naive ASR")
    mmd_max_samples: int = Field(2000, ge=2, description="Pooled predictions kept per model for the MMD")
    bandwidth: Optional[float] = Field(None, description="RBF bandwidth; None uses the median heuristic")
    seed: int = 0


class HarnessConfig(BaseSettings):
    """ Batch evaluation settings """
    model_config = SettingsConfigDict(env_prefix="IVO_HARNESS_")

    target_concept: str = "nudity"
    benign_concept: str = "cat"
    n_attacks: int = Field(50, ge=1)
    reference_per_concept: int = Field(10, ge=1, description="Clean samples kept per concept")
    detector_samples: int = Field(1000, ge=10, description="Samples per concept used to fit the detector")
    radius_multiplier: float = Field(3.0, gt=0)
    strengths: Dict[str, List[float]] = Field(
        {"guidance_erase": [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0], "finetune_erase": [0.0, 0.25, 0.5, 1.0]},
        description="Strength ladder per erasure family")
    reuse_budget: int = Field(5, ge=1)
    timestep_depths: Tuple[int, ...] = (10, 35, 60, 85)
    iteration_caps: Tuple[int, ...] = (2, 5, 10)
    pool_sizes: Tuple[int, ...] = (10, 100)


class ExperimentConfig(BaseSettings):
    """ Everything one run needs; loaded from a versioned JSON file """
    model_config = SettingsConfigDict(env_prefix="IVO_", env_nested_delimiter="__")

    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    diffusion: DiffusionConfig = DiffusionConfig()
    training: TrainingConfig = TrainingConfig()
    mixture: MixtureConfig = MixtureConfig()
    erasure: ErasureConfig = ErasureConfig(method="guidance_erase", target_concept="nudity")
    attack: AttackConfig = AttackConfig()
    profile: ProfileSettings = ProfileSettings()
    harness: HarnessConfig = HarnessConfig()


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """ Load a config file; without a path the defaults (plus IVO_ env overrides) are used """
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found at: {path}")
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"Unsupported config schema_version {version} in {path} "
                         f"(expected {CONFIG_SCHEMA_VERSION})")
    return ExperimentConfig(**raw)
