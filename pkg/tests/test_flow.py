import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ppc.config import ModelConfig, SampleConfig, TrainConfig, WorldConfig
from ppc.errors import NumericBlowup, ShapeMismatch
from ppc.flow import (FlowBatch, cfg_combine, euler_sample, interpolate, make_training_batch,
                      stage_loss, velocity_target)
from ppc.iterate import generate_batch
from ppc.model import DualStreamDiT, init_pose_stream
from ppc.seq import patchify
from ppc.train import train_phase
from ppc.world import NULL, decompose_stages, gen_scene, gen_scenes

WORLD = WorldConfig(patch=4)
TINY = ModelConfig(dim=16, depth=1, heads=1, head_dim=16, mlp_ratio=2, lora_rank=2,
                   rope_split=(4, 6, 6))


def _pair(seed=0, shape=(2, 3, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(shape, dtype=torch.float64, generator=g),
            torch.randn(shape, dtype=torch.float64, generator=g))


def _flow_batch(v_pose, v_img, u_pose, u_img, final):
    """Hand-built FlowBatch around given targets (the remaining fields are placeholders)."""
    z = torch.zeros_like(u_pose)
    t = torch.zeros(u_pose.shape[0], dtype=u_pose.dtype)
    return FlowBatch(x1_pose=z, x0_pose=z, t_pose=t, xt_pose=z, u_pose=u_pose, x0_img=z, t_img=t,
                     xt_img=z, img_mask=torch.as_tensor(final), x1_img=z, u_img=u_img)


# ----------------------------------------------------------------- interpolate / velocity

def test_interpolate_endpoints_exact():
    x1, x0 = _pair()
    assert torch.equal(interpolate(x1, x0, 0.0), x1)
    assert torch.equal(interpolate(x1, x0, 1.0), x0)
    assert torch.equal(interpolate(torch.zeros_like(x0), x0, 0.5), 0.5 * x0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_interpolate_endpoints_property(seed):
    x1, x0 = _pair(seed, (3, 2, 5))
    t = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    out = interpolate(x1, x0, t)
    assert torch.equal(out[0], x1[0]) and torch.equal(out[1], x0[1]) and torch.equal(out[2], x1[2])


def test_interpolate_derivative_is_velocity():
    x1, x0 = _pair(7)
    u = velocity_target(x0, x1)
    h = 1e-6
    for t in (0.1, 0.37, 0.8):
        fd = (interpolate(x1, x0, t + h) - interpolate(x1, x0, t)) / h
        rel = (fd - u).norm() / u.norm()
        assert rel < 1e-4
    # the sampler integrates t downward, so d x_t / d(-t) = -u
    assert torch.equal(velocity_target(x0, x1), x0 - x1)


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)
    with pytest.raises(ShapeMismatch):
        velocity_target(torch.zeros(2, 3), torch.zeros(2, 4))


def test_velocity_target_examples():
    x1, x0 = _pair(3)
    assert torch.all(velocity_target(x1, x1) == 0)
    assert torch.equal(velocity_target(x0, torch.zeros_like(x0)), x0)
    a, b = x0.numpy(), x1.numpy()
    np.testing.assert_array_equal(velocity_target(x0, x1).numpy(), a - b)


# ----------------------------------------------------------------- loss

def test_intermediate_stage_image_term_is_zero():
    u = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    junk = torch.full_like(u, 123.0)
    batch = _flow_batch(u, junk, u, u, [True])
    terms = stage_loss(u, junk, batch, stage=1, num_people=2)
    assert terms.img.item() == 0.0 and terms.total.item() == 0.0


def test_perfect_prediction_zero_loss():
    x1, x0 = _pair(4)
    u = velocity_target(x0, x1)
    terms = stage_loss(u, u, _flow_batch(u, u, u, u, [True, True]))
    assert terms.total.item() == 0.0


def test_unit_errors_give_two():
    zero = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    one = torch.ones_like(zero)
    terms = stage_loss(one, one, _flow_batch(one, one, zero, zero, [True]), stage=2, num_people=2)
    assert terms.total.item() == 2.0
    assert terms.pose.item() == 1.0 and terms.img.item() == 1.0


def test_lambdas_weight_terms():
    zero = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    one = torch.ones_like(zero)
    terms = stage_loss(one, 2 * one, _flow_batch(one, one, zero, zero, [True]),
                       lambda_pose=0.5, lambda_img=0.25)
    assert terms.total.item() == 0.5 * 1.0 + 0.25 * 4.0


def test_image_head_gradients_zero_on_intermediate_batch():
    model = DualStreamDiT(TINY, WORLD)
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(3)))[1] for k in range(3)]
    assert not any(s.is_final for s in stages)
    tokens, flow = make_training_batch(stages, np.random.default_rng(0))
    assert flow.u_img is None and not bool(flow.img_mask.any())
    v_pose, v_img = model(tokens)
    # a junk image target must still be masked out by the stage indicator
    flow.u_img = torch.randn_like(v_img)
    terms = stage_loss(v_pose, v_img, flow, stage=2, num_people=3)
    assert terms.img.item() == 0.0 and not terms.img.requires_grad
    # pose segments share the image head before the pose stream exists
    g_total = torch.autograd.grad(terms.total, list(model.image_head.parameters()), retain_graph=True)
    g_pose = torch.autograd.grad(terms.pose, list(model.image_head.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(g_total, g_pose))


def test_mixed_batch_masks_image_gradient_per_sample():
    v_img = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    u = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    batch = _flow_batch(u, v_img, u, u, [False, True])
    terms = stage_loss(u, v_img, batch, stage=[2, 3], num_people=3)
    (g,) = torch.autograd.grad(terms.total, [v_img])
    assert torch.all(g[0] == 0) and g[1].abs().sum() > 0


def test_image_head_untouched_by_intermediate_batch_in_phase2():
    model = init_pose_stream(DualStreamDiT(TINY, WORLD))
    for p in model.image_head.parameters():
        p.requires_grad_(True)
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(2)))[0] for k in range(2)]
    tokens, flow = make_training_batch(stages, np.random.default_rng(1))
    terms = stage_loss(*model(tokens), flow)
    grads = torch.autograd.grad(terms.total, list(model.image_head.parameters()), allow_unused=True,
                                materialize_grads=True)
    assert all(torch.all(g == 0) for g in grads)


# ----------------------------------------------------------------- CFG

def test_cfg_examples():
    c, u = torch.tensor(2.0), torch.tensor(1.0)
    assert cfg_combine(c, u, 4.0).item() == 5.0
    assert cfg_combine(c, u, 1.0) is c
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    pair = cfg_combine((c, 2 * c), (u, 2 * u), 4.0)
    assert pair[0].item() == 5.0 and pair[1].item() == 10.0


def test_cfg_neutral_ignores_unconditional():
    x1, x0 = _pair(5)
    cond = lambda x, t: x0 - x1 + 0.1 * x
    poisoned = lambda x, t: cfg_combine(cond(x, t), torch.full_like(x, float("nan")), 1.0)
    assert torch.equal(euler_sample(poisoned, x0, 7), euler_sample(cond, x0, 7))


# ----------------------------------------------------------------- sampler

@pytest.mark.parametrize("steps", [1, 2, 3, 10, 50])
def test_euler_constant_field_exact(steps):
    x1, x0 = _pair(6)
    out = euler_sample(lambda x, t: x0 - x1, x0, steps)
    assert (out - x1).abs().max() < 1e-9


def test_euler_zero_field_identity():
    x1, x0 = _pair(8)
    assert torch.equal(euler_sample(lambda x, t: torch.zeros_like(x), x0, 5), x0)


def test_euler_one_step_equals_two_for_constant_field():
    x1, x0 = _pair(9)
    v = lambda x, t: x0 - x1
    torch.testing.assert_close(euler_sample(v, x0, 1), euler_sample(v, x0, 2), rtol=0, atol=1e-12)


def test_euler_time_grid_and_tuple_state():
    seen = []

    def v(x, t):
        seen.append(t)
        return tuple(torch.ones_like(xi) for xi in x)

    a, b = euler_sample(v, (torch.zeros(2), torch.zeros(3)), SampleConfig(steps=4))
    assert seen == [1.0, 0.75, 0.5, 0.25]
    assert torch.allclose(a, -torch.ones(2)) and torch.allclose(b, -torch.ones(3))


def test_euler_blowup_reports_step():
    def v(x, t):
        return torch.full_like(x, float("inf")) if t < 0.5 else torch.zeros_like(x)

    with pytest.raises(NumericBlowup) as err:
        euler_sample(v, torch.zeros(3), 4)
    assert err.value.step == 3
    with pytest.raises(ValueError):
        euler_sample(v, torch.zeros(3), 0)


@pytest.fixture(scope="module")
def toy_model():
    torch.manual_seed(0)
    model = DualStreamDiT(TINY, WORLD)
    train_phase(TrainConfig(steps=150, batch_size=8, lr=3e-3, p_drop=0.0),
                gen_scenes(10, 64, WORLD.with_people(1)), model)
    return model


def test_sampler_refinement_trend(toy_model):
    specs = gen_scenes(500, 3, WORLD.with_people(1))

    def final(steps):
        traces = generate_batch(toy_model, specs, SampleConfig(steps=steps, guidance=1.0))
        return np.stack([np.concatenate([t.stages[-1].raw_pose, t.final_image]) for t in traces])

    ref = final(160)
    errs = [np.sqrt(np.mean((final(s) - ref) ** 2)) for s in (5, 10, 20, 40)]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


# ----------------------------------------------------------------- training batches

def test_make_training_batch_deterministic():
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(2)))[-1] for k in range(3)]
    a_tok, a = make_training_batch(stages, np.random.default_rng(11), p_drop=0.5)
    b_tok, b = make_training_batch(stages, np.random.default_rng(11), p_drop=0.5)
    for name in ("x0_pose", "x0_img", "t_pose", "t_img", "xt_pose", "xt_img", "u_pose", "u_img"):
        assert torch.equal(getattr(a, name), getattr(b, name))
    assert torch.equal(a_tok.text_ids, b_tok.text_ids) and torch.equal(a_tok.image, b_tok.image)


def test_make_training_batch_flow_identities():
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(2)))[-1] for k in range(4)]
    _, fb = make_training_batch(stages, np.random.default_rng(3), dtype=torch.float64)
    assert not torch.equal(fb.t_pose, fb.t_img)
    torch.testing.assert_close(fb.xt_pose, interpolate(fb.x1_pose, fb.x0_pose, fb.t_pose), rtol=0, atol=0)
    torch.testing.assert_close(fb.u_img, fb.x0_img - fb.x1_img, rtol=0, atol=0)
    assert bool(fb.img_mask.all())


def test_intermediate_batch_has_no_image_target():
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(2)))[0] for k in range(2)]
    tokens, fb = make_training_batch(stages, np.random.default_rng(0), dtype=torch.float64)
    assert fb.u_img is None and fb.x1_img is None
    # the image input carries noise only
    torch.testing.assert_close(fb.xt_img, fb.t_img[:, None, None, None] * fb.x0_img, rtol=0, atol=0)


def test_context_is_clean_previous_pose():
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(3)))[2] for k in range(2)]
    tokens, _ = make_training_batch(stages, np.random.default_rng(0), dtype=torch.float64)
    for b, s in enumerate(stages):
        ref = patchify(torch.from_numpy(s.context_pose[None]).double(), WORLD.patch)[0]
        torch.testing.assert_close(tokens.pose_ctx[b], ref, rtol=0, atol=0)


def test_prompt_dropout_all():
    stages = [decompose_stages(gen_scene(k, WORLD.with_people(2)))[-1] for k in range(3)]
    tokens, _ = make_training_batch(stages, np.random.default_rng(0), p_drop=1.0)
    assert torch.all(tokens.text_ids == NULL) and torch.all(tokens.global_ids == NULL)
    tokens, _ = make_training_batch(stages, np.random.default_rng(0), p_drop=0.0)
    assert not torch.any(tokens.text_ids == NULL)
