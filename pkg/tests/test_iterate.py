import dataclasses

import numpy as np
import pytest
import torch

import ppc.iterate as iterate
from ppc.config import ModelConfig, SampleConfig, WorldConfig
from ppc.iterate import (ITERATIVE, SINGLE_PASS, clean_context, export_trace, generate_batch,
                         generate_scene, read_ppm, to_bytes, write_ppm)
from ppc.model import DualStreamDiT, init_pose_stream
from ppc.train import randomize_
from ppc.world import gen_scene, render_pose

WORLD = WorldConfig(patch=4)
TINY = ModelConfig(dim=16, depth=1, heads=1, head_dim=16, mlp_ratio=2, lora_rank=2,
                   rope_split=(4, 6, 6))
FAST = SampleConfig(steps=3, guidance=2.0, seed=5)


@pytest.fixture(scope="module")
def model():
    m = init_pose_stream(DualStreamDiT(TINY, WORLD))
    randomize_(m, scale=0.1, seed=3)
    return m


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_single_person(model):
    spec = gen_scene(1, WORLD.with_people(1))
    trace = generate_scene(model, spec, FAST)
    assert len(trace.stages) == 1
    st = trace.stages[0]
    assert np.all(st.context == -1)
    assert st.pose.shape == (3, 32, 32) and st.image.shape == (3, 32, 32)
    assert trace.final_pose is st.pose and trace.final_image is st.image


def test_three_people_context_chain(model):
    spec = gen_scene(2, WORLD.with_people(3))
    trace = generate_scene(model, spec, FAST)
    assert [s.stage for s in trace.stages] == [1, 2, 3]
    assert np.all(trace.stages[0].context == render_pose([], spec.canvas))
    for prev, cur in zip(trace.stages, trace.stages[1:]):
        assert np.array_equal(cur.context, prev.pose)


def test_deterministic(model):
    spec = gen_scene(3, WORLD.with_people(2))
    a = generate_scene(model, spec, FAST)
    b = generate_scene(model, spec, FAST)
    for x, y in zip(a.stages, b.stages):
        assert _same((x.pose, x.raw_pose, x.image, x.context), (y.pose, y.raw_pose, y.image, y.context))
        assert x.noise_seed == y.noise_seed
    c = generate_scene(model, spec, SampleConfig(steps=3, guidance=2.0, seed=6))
    assert not np.array_equal(a.final_pose, c.final_pose)


def test_batched_equals_single(model):
    specs = [gen_scene(k, WORLD.with_people(n)) for k, n in ((4, 1), (5, 2), (6, 2))]
    batched = generate_batch(model, specs, FAST)
    for spec, tr in zip(specs, batched):
        solo = generate_scene(model, spec, FAST)
        for x, y in zip(tr.stages, solo.stages):
            np.testing.assert_allclose(x.raw_pose, y.raw_pose, rtol=0, atol=1e-5)


@pytest.mark.parametrize("guidance,per_step", [(1.0, 1), (2.0, 2), (0.0, 2)])
def test_evaluation_count(model, guidance, per_step):
    spec = gen_scene(7, WORLD.with_people(3))
    trace = generate_scene(model, spec, SampleConfig(steps=4, guidance=guidance))
    assert len(trace.stages) == 3
    assert trace.evaluations == 3 * 4 * per_step


def test_guidance_one_skips_unconditional(model, monkeypatch):
    spec = gen_scene(8, WORLD.with_people(1))
    sizes = []
    forward = type(model).forward

    def spy(self, batch):
        sizes.append(batch.batch_size)
        return forward(self, batch)

    monkeypatch.setattr(type(model), "forward", spy)
    generate_scene(model, spec, SampleConfig(steps=2, guidance=1.0))
    assert sizes == [1, 1]


def test_discarded_image_does_not_leak(model, monkeypatch):
    spec = gen_scene(9, WORLD.with_people(2))
    reference = generate_scene(model, spec, FAST)
    real = iterate.euler_sample
    calls = []

    def zero_first_image(fn, x, steps):
        out = real(fn, x, steps)
        calls.append(len(out))
        if len(calls) == 1:
            out = (out[0], torch.zeros_like(out[1]))
        return out

    monkeypatch.setattr(iterate, "euler_sample", zero_first_image)
    perturbed = generate_scene(model, spec, FAST)
    assert np.all(perturbed.stages[0].image == 0)
    assert np.array_equal(perturbed.stages[1].raw_pose, reference.stages[1].raw_pose)
    assert np.array_equal(perturbed.stages[1].image, reference.stages[1].image)


def test_fresh_noise_per_stage_and_reuse(model):
    spec = gen_scene(10, WORLD.with_people(2))
    fresh = generate_scene(model, spec, FAST)
    assert fresh.stages[0].noise_seed != fresh.stages[1].noise_seed
    reused = generate_scene(model, spec, SampleConfig(steps=3, guidance=2.0, seed=5, reuse_noise=True))
    assert reused.stages[0].noise_seed == reused.stages[1].noise_seed


def test_single_pass_mode(model):
    spec = gen_scene(11, WORLD.with_people(3))
    trace = generate_scene(model, spec, FAST, mode=SINGLE_PASS)
    assert trace.mode == SINGLE_PASS and len(trace.stages) == 1
    assert np.all(trace.stages[0].context == -1)
    assert trace.evaluations == FAST.steps * 2
    assert generate_scene(model, spec, FAST, mode=ITERATIVE).mode == ITERATIVE


def test_skip_intermediate_image(model):
    spec = gen_scene(12, WORLD.with_people(2))
    trace = generate_scene(model, spec, SampleConfig(steps=2, skip_intermediate_image=True))
    assert trace.stages[0].image is None and trace.stages[1].image is not None


def test_rejects_bad_inputs(model):
    spec = gen_scene(13, WORLD.with_people(1))
    with pytest.raises(ValueError):
        generate_scene(model, spec, FAST, mode="sideways")
    with pytest.raises(ValueError):
        generate_scene(model, dataclasses.replace(spec, num_people=0, persons=()), FAST)


def test_text_tau_changes_output(model):
    spec = gen_scene(14, WORLD.with_people(2))
    a = generate_scene(model, spec, FAST)
    b = generate_scene(model, spec, FAST, text_tau=False)
    assert not np.array_equal(a.final_pose, b.final_pose)


def test_clean_context():
    raster = np.array([[[-1.05, -0.95, -0.85, 0.3, 1.4]]], dtype=np.float32)
    out = clean_context(raster, snap=0.1)
    np.testing.assert_allclose(out[0, 0], [-1.0, -1.0, -0.85, 0.3, 1.0], rtol=0, atol=1e-7)


# ----------------------------------------------------------------- export

def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    raster = rng.uniform(-1, 1, (3, 7, 5)).astype(np.float32)
    # include byte values that are ASCII whitespace
    raster[:, 0, 0] = (np.array([9, 10, 32]) / 127.5) - 1
    write_ppm(tmp_path / "a.ppm", raster)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), to_bytes(raster))
    write_ppm(tmp_path / "g.pgm", raster[:1])
    assert read_ppm(tmp_path / "g.pgm").shape == (7, 5, 1)
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "bad.ppm", raster[:2])


def test_export_trace(model, tmp_path):
    spec = gen_scene(15, WORLD.with_people(2))
    trace = generate_scene(model, spec, FAST)
    out = export_trace(trace, tmp_path / "scene")
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.txt", "stage1_image.ppm", "stage1_pose.ppm", "stage2_image.ppm",
                     "stage2_pose.ppm"]
    assert np.array_equal(read_ppm(out / "stage2_pose.ppm"), to_bytes(trace.final_pose))
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert manifest[:4] == [f"spec_seed={spec.seed}", "mode=iterative", "stages=2",
                            f"evaluations={trace.evaluations}"]
    assert manifest[4].startswith("stage=1 pose=stage1_pose.ppm image=stage1_image.ppm noise_seed=5,")
