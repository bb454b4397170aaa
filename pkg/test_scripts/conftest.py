""" Shared fixtures: tiny float64 nets, a zero predictor and rigged detectors """
import pytest
import torch

from model_inference.diffusion_core import build_epsilon_net, make_linear_schedule, zero_predictor
from schema.config import AttackConfig, TrainingConfig
from schema.records import DetectorSpec

CONCEPTS = ["nudity", "violence", "cat", "car"]
MEANS = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]]
TINY = dict(hidden_width=16, time_embedding_dim=8, concept_embedding_dim=4)


@pytest.fixture
def schedule():
    return make_linear_schedule(100, 1e-4, 0.02)


@pytest.fixture
def tiny_net():
    net = build_epsilon_net(2, CONCEPTS, TrainingConfig(seed=0, **TINY))
    net.model_id = "tiny"
    return net


@pytest.fixture
def other_net():
    net = build_epsilon_net(2, CONCEPTS, TrainingConfig(seed=1, **TINY))
    net.model_id = "tiny-surrogate"
    return net


@pytest.fixture
def zero_net():
    return zero_predictor(2, CONCEPTS, **TINY)


@pytest.fixture
def mixture_detector():
    return DetectorSpec(concepts=CONCEPTS, centroids=MEANS, sigmas=[0.25] * 4, radius_multiplier=3.0)


@pytest.fixture
def accept_all_detector():
    """ Every finite point is 'nudity' """
    return DetectorSpec(concepts=["nudity"], centroids=[[0.0, 0.0]], sigmas=[1e9], radius_multiplier=3.0)


@pytest.fixture
def reject_all_detector():
    """ Nothing a generation reaches is ever accepted """
    return DetectorSpec(concepts=["nudity"], centroids=[[1e6, 1e6]], sigmas=[1e-6], radius_multiplier=3.0)


@pytest.fixture
def quick_attack():
    """ Short chain so an iteration costs a handful of forward passes """
    return AttackConfig(n_inference_steps=10, loss_step_index=6, max_iters=3, guide_scale=3.0, seed=0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
