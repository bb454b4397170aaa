""" Records that cross a file boundary: pool lines, attack/run reports, detector """
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

POOL_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

# Stated in every run report so toy numbers are not read as image-scale ones.
METRIC_MAPPING_NOTE = (
    "ASR: single nearest-centroid oracle detector; "
    "quality_divergence: RBF-MMD between successful outputs and clean concept samples; "
    "diversity_mean_similarity: cosine between centroid-centred output and centroid-centred "
    "inversion reference"
)


class DetectorSpec(BaseModel):
    """ Nearest-centroid concept detector with a per-concept acceptance radius """
    concepts: List[str]
    centroids: List[List[float]]
    sigmas: List[float]
    radius_multiplier: float = Field(3.0, gt=0)

    @model_validator(mode="after")
    def _aligned(self):
        if not (len(self.concepts) == len(self.centroids) == len(self.sigmas)):
            raise ValueError("concepts, centroids and sigmas must have the same length")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be non-negative")
        return self


class PoolEntry(BaseModel):
    """ One successful adversarial initial latent """
    latent: List[float]
    concept: str
    victim_id: str
    iterations_used: int = Field(0, ge=0)
    created_at: str
    success_metrics: Dict[str, Any] = {}
    format_version: int = POOL_FORMAT_VERSION

    @field_validator("latent")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("latent must be non-empty")
        return v


class AttackResult(BaseModel):
    """ Outcome of one attack (fresh or reused) """
    success: bool
    final_latent: List[float]
    iterations: int = Field(ge=0)
    loss_trace: List[Tuple[float, float, float]] = []  # (L_overall, L_DML, L_DCL)
    generated_sample: List[float]
    detector_verdict: Optional[str] = None
    target_concept: str
    seed: Optional[int] = None
    init_kind: str = "gaussian"
    loss_timestep: Optional[int] = None
    chain_model: str = "victim"
    pool_draws: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.loss_trace) != self.iterations:
            raise ValueError(f"loss_trace length {len(self.loss_trace)} != iterations {self.iterations}")
        if self.success != (self.detector_verdict == self.target_concept):
            raise ValueError("success must hold exactly when the verdict is the target concept")
        return self


class MmdReport(BaseModel):
    """ Discrepancy between a base model and one victim """
    model_ids: Tuple[str, str]
    mmd_value: float = Field(ge=0)
    naive_asr: float = Field(ge=0, le=1)
    per_step_gap: List[float]
    kernel_bandwidth: float = Field(gt=0)
    erasure: Optional[Dict[str, Any]] = None
    statistic: str = ("unbiased RBF-MMD^2 over pooled raw per-step noise predictions, "
                      "each augmented with its normalized timestep; clamped at 0")
    settings: Dict[str, Any] = {}


class RunReport(BaseModel):
    """ Aggregate of one attack batch """
    asr: float = Field(ge=0, le=1)
    mean_iterations: float = Field(ge=0)
    diversity_mean_similarity: Optional[float] = None
    quality_divergence: Optional[float] = None
    similarities: List[float] = []
    config_snapshot: Dict[str, Any] = {}
    per_attack: List[AttackResult] = []
    victim_id: str = ""
    concept: str = ""
    mode: str = "fresh"
    reference_sample: Optional[List[float]] = None
    metric_notes: str = METRIC_MAPPING_NOTE

    @model_validator(mode="after")
    def _asr_matches(self):
        if self.per_attack:
            recomputed = sum(r.success for r in self.per_attack) / len(self.per_attack)
            if recomputed != self.asr:
                raise ValueError(f"asr {self.asr} does not match per-attack successes {recomputed}")
        return self
