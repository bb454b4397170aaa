import pytest
import torch

from conftest import CONCEPTS, TINY
from model_inference.diffusion_core import (
    DTYPE, ConceptDataset, GuidanceSpec, NonFiniteValueError, TrainingDivergedError, TrainingError,
    UnknownConceptError, ddim_invert, ddim_sample, ddim_step, default_steps, denoise_to, forward_diffuse,
    guided_noise, latent_gradient, load_checkpoint, make_linear_schedule, make_mixture_dataset,
    save_checkpoint, train_epsilon_net)
from schema.config import MixtureConfig, TrainingConfig


# region schedule
def test_schedule_alpha_bar_is_one_at_zero_and_strictly_decreasing(schedule):
    assert float(schedule.alpha_bar(0)) == 1.0
    bars = [float(schedule.alpha_bar(t)) for t in range(schedule.T + 1)]
    assert all(b < a for a, b in zip(bars, bars[1:]))
    assert 0 < bars[-1] < 1


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (100, 0.0, 0.02), (100, 0.03, 0.02), (100, 1e-4, 1.0)])
def test_schedule_rejects_bad_inputs(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_two_step_schedule_values():
    schedule = make_linear_schedule(2, 0.1, 0.1)
    assert [float(schedule.alpha_bar(t)) for t in (0, 1, 2)] == pytest.approx([1.0, 0.9, 0.81], abs=1e-15)


def test_default_schedule_matches_a_running_product(schedule):
    assert float(schedule.alpha_bar(1)) == pytest.approx(0.9999, abs=1e-15)
    product = 1.0
    for i in range(100):
        product *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 99)
    assert float(schedule.alpha_bar(100)) == pytest.approx(product, rel=1e-12)


def test_alpha_bar_out_of_range(schedule):
    with pytest.raises(ValueError):
        schedule.alpha_bar(schedule.T + 1)


def test_default_steps_run_from_T_to_one(schedule):
    steps = default_steps(schedule)
    assert steps[0] == 100 and steps[-1] == 1 and len(steps) == 100
    short = default_steps(schedule, 10)
    assert len(short) == 10 and short[0] == 100 and short[-1] == 1
    assert all(b < a for a, b in zip(short, short[1:]))


def test_forward_diffuse_without_noise_scales_by_sqrt_alpha_bar(schedule):
    z0 = torch.tensor([1.0, -2.0], dtype=DTYPE)
    out = forward_diffuse(z0, 50, torch.zeros(2, dtype=DTYPE), schedule)
    assert torch.allclose(out, schedule.alpha_bar(50).sqrt() * z0)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 0, torch.zeros(2, dtype=DTYPE), schedule)


def test_forward_diffuse_at_alpha_bar_one_quarter():
    schedule = make_linear_schedule(2, 0.5, 0.5)
    assert float(schedule.alpha_bar(2)) == pytest.approx(0.25)
    out = forward_diffuse(torch.tensor([1.0, 0.0], dtype=DTYPE), 2, torch.tensor([0.0, 1.0], dtype=DTYPE), schedule)
    assert out.tolist() == pytest.approx([0.5, 0.8660254037844386], abs=1e-12)
# endregion


# region guidance
def test_guidance_scale_zero_and_one_are_exact(tiny_net):
    z = torch.tensor([0.3, -0.7], dtype=DTYPE)
    uncond = tiny_net.predict(z, 40, None)
    cond = tiny_net.predict(z, 40, "cat")
    assert torch.equal(guided_noise(tiny_net, z, 40, GuidanceSpec(0.0, "cat")), uncond)
    assert torch.equal(guided_noise(tiny_net, z, 40, GuidanceSpec(1.0, "cat")), cond)
    assert torch.allclose(guided_noise(tiny_net, z, 40, GuidanceSpec(3.0, "cat")), uncond + 3.0 * (cond - uncond))


def test_guidance_rejects_unknown_concept_and_negative_scale(tiny_net):
    z = torch.zeros(2, dtype=DTYPE)
    with pytest.raises(UnknownConceptError):
        guided_noise(tiny_net, z, 10, GuidanceSpec(3.0, "dog"))
    with pytest.raises(ValueError):
        GuidanceSpec(-1.0, "cat")


def test_batched_and_single_predictions_agree(tiny_net):
    z = torch.randn(5, 2, dtype=DTYPE)
    batch = tiny_net.predict(z, 30, "car")
    assert torch.allclose(batch[2], tiny_net.predict(z[2], 30, "car"))
# endregion


# region DDIM
def test_ddim_step_is_identity_when_timestep_does_not_change(schedule):
    z = torch.tensor([1.0, 2.0], dtype=DTYPE)
    assert torch.equal(ddim_step(z, torch.ones(2, dtype=DTYPE), 20, 20, schedule), z)


@pytest.mark.parametrize("t, t_prev", [(60, 0), (60, 25), (25, 60), (100, 1)])
def test_ddim_step_with_the_true_noise_lands_on_the_forward_marginal(schedule, t, t_prev):
    gen = torch.Generator().manual_seed(t * 1000 + t_prev)
    x0 = torch.randn(8, 2, generator=gen, dtype=DTYPE)
    eps = torch.randn(8, 2, generator=gen, dtype=DTYPE)
    out = ddim_step(forward_diffuse(x0, t, eps, schedule), eps, t, t_prev, schedule)
    expected = x0 if t_prev == 0 else forward_diffuse(x0, t_prev, eps, schedule)
    assert torch.allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_zero_predictor_inverts_and_regenerates_exactly(zero_net, schedule):
    x = torch.tensor([1.5, -0.5], dtype=DTYPE)
    guide = GuidanceSpec(0.0, None)
    z_T = ddim_invert(zero_net, x, guide, list(range(1, schedule.T + 1)), schedule)
    assert torch.allclose(z_T, schedule.alpha_bar(schedule.T).sqrt() * x, rtol=1e-12, atol=0)
    x_back, traj = ddim_sample(zero_net, z_T, guide, default_steps(schedule), schedule)
    assert torch.allclose(x_back, x, rtol=1e-10, atol=1e-12)
    assert len(traj.noise_preds) == schedule.T and len(traj.latents) == schedule.T + 1


def test_sampling_rejects_unordered_steps(tiny_net, schedule):
    with pytest.raises(ValueError):
        ddim_sample(tiny_net, torch.zeros(2, dtype=DTYPE), GuidanceSpec(1.0, "cat"), [10, 20, 5], schedule)
    with pytest.raises(ValueError):
        ddim_invert(tiny_net, torch.zeros(2, dtype=DTYPE), GuidanceSpec(0.0), [20, 10], schedule)


def test_denoise_to_stops_at_the_last_listed_step(zero_net, schedule):
    z = torch.tensor([1.0, 1.0], dtype=DTYPE)
    out = denoise_to(zero_net, z, GuidanceSpec(3.0, "cat"), [100, 60], schedule)
    expected = z * schedule.alpha_bar(60).sqrt() / schedule.alpha_bar(100).sqrt()
    assert torch.allclose(out, expected)


def test_latent_gradient_matches_central_differences(tiny_net, schedule):
    steps = [100, 80, 60, 40, 20, 1]
    guide = GuidanceSpec(3.0, "nudity")

    def loss_fn(z):
        return (denoise_to(tiny_net, z, guide, steps, schedule) ** 2).sum()

    gen = torch.Generator().manual_seed(3)
    h = 1e-5
    for _ in range(20):
        z = torch.randn(2, generator=gen, dtype=DTYPE)
        grad = latent_gradient(loss_fn, z)
        fd = torch.zeros(2, dtype=DTYPE)
        with torch.no_grad():
            for d in range(2):
                e = torch.zeros(2, dtype=DTYPE)
                e[d] = h
                fd[d] = (loss_fn(z + e) - loss_fn(z - e)) / (2 * h)
        assert float((grad - fd).norm() / max(float(fd.norm()), 1e-8)) <= 1e-3


def test_latent_gradient_of_half_squared_norm_is_the_latent():
    z = torch.tensor([0.3, -1.7], dtype=DTYPE)
    assert torch.allclose(latent_gradient(lambda v: 0.5 * (v ** 2).sum(), z), z, rtol=0, atol=1e-15)


def test_latent_gradient_of_constant_loss_is_zero():
    grad = latent_gradient(lambda z: torch.tensor(2.0, dtype=DTYPE), torch.ones(2, dtype=DTYPE))
    assert torch.equal(grad, torch.zeros(2, dtype=DTYPE))


def test_latent_gradient_rejects_non_finite_loss():
    with pytest.raises(NonFiniteValueError):
        latent_gradient(lambda z: z.sum() * float("nan"), torch.ones(2, dtype=DTYPE))
# endregion


# region training & checkpoints
def test_short_training_run_reports_heldout_loss(schedule):
    dataset = make_mixture_dataset(MixtureConfig(n_per_concept=20), seed=0)
    hyper = TrainingConfig(n_steps=20, batch_size=32, heldout_loss_threshold=None, log_every=10, **TINY)
    model = train_epsilon_net(dataset, schedule, hyper)
    assert model.concepts == CONCEPTS
    assert model.heldout_loss == model.heldout_loss  # not NaN


def test_training_above_heldout_threshold_is_an_error(schedule):
    dataset = make_mixture_dataset(MixtureConfig(n_per_concept=20), seed=0)
    hyper = TrainingConfig(n_steps=2, batch_size=16, heldout_loss_threshold=1e-9, **TINY)
    with pytest.raises(TrainingError):
        train_epsilon_net(dataset, schedule, hyper)


def test_training_divergence_is_reported(schedule):
    spec = {c: ([0.0, 0.0], 1.0) for c in CONCEPTS}
    points = torch.full((8, 2), 1e200, dtype=DTYPE)
    dataset = ConceptDataset(points, [c for c in CONCEPTS for _ in range(2)], spec)
    with pytest.raises(TrainingDivergedError):
        train_epsilon_net(dataset, schedule, TrainingConfig(n_steps=5, batch_size=4, **TINY))


def test_training_on_empty_dataset_is_an_error(schedule):
    empty = make_mixture_dataset(MixtureConfig(), exclude=CONCEPTS)
    with pytest.raises(ValueError):
        train_epsilon_net(empty, schedule, TrainingConfig(n_steps=1, **TINY))


def test_withheld_concept_keeps_its_vocabulary_slot():
    dataset = make_mixture_dataset(MixtureConfig(n_per_concept=5), exclude=["nudity"])
    assert "nudity" not in dataset.labels
    assert dataset.concepts == CONCEPTS


def test_checkpoint_round_trip(tiny_net, schedule, tmp_path):
    path = save_checkpoint(tiny_net, schedule, str(tmp_path / "net.pt"))
    loaded, loaded_schedule = load_checkpoint(path)
    z = torch.randn(4, 2, dtype=DTYPE)
    assert torch.equal(loaded.predict(z, 17, "violence"), tiny_net.predict(z, 17, "violence"))
    assert loaded.model_id == "tiny"
    assert torch.equal(loaded_schedule.alpha_bars, schedule.alpha_bars)


def test_checkpoint_version_mismatch(tiny_net, schedule, tmp_path):
    from model_inference.diffusion_core import checkpoint_payload
    payload = checkpoint_payload(tiny_net, schedule)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(str(tmp_path / "bad.pt"))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.pt"))
# endregion
