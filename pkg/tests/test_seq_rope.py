import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ppc.config import WorldConfig
from ppc.errors import InvalidSplit, ShapeMismatch, SpanConflict
from ppc.rope import apply_rope, build_rope_tables
from ppc.seq import (IMAGE, POSE, POSE_CTX, TEXT, Segment, assemble_batch, assemble_sequence,
                     assign_positions, patchify, stage_layout, unpatchify)
from ppc.world import NULL, Box, decompose_stages, gen_scene


# ----------------------------------------------------------------- positions

def _visual(grid):
    return [Segment(POSE, grid[0] * grid[1])]


def test_token_inside_single_box():
    grid = (8, 8)
    boxes = [(1, Box(0, 0, 2, 2)), (2, Box(2, 4, 5, 7))]
    pos = assign_positions(_visual(grid), boxes, [], grid)
    assert tuple(pos[5 * 8 + 3]) == (2, 3, 5)


def test_token_outside_boxes():
    grid = (8, 8)
    pos = assign_positions(_visual(grid), [(1, Box(0, 0, 2, 2))], [], grid)
    assert tuple(pos[7 * 8 + 6]) == (0, 6, 7)


def test_later_box_overwrites():
    grid = (8, 8)
    boxes = [(1, Box(0, 0, 4, 4)), (2, Box(2, 2, 6, 6))]
    pos = assign_positions(_visual(grid), boxes, [], grid)
    assert pos[3 * 8 + 3, 0] == 2
    assert pos[1 * 8 + 1, 0] == 1


def test_text_spans_and_conflict():
    grid = (4, 4)
    layout = [Segment(TEXT, 12), Segment(POSE, 16)]
    pos = assign_positions(layout, [], [(1, (0, 6)), (2, (6, 12))], grid)
    assert list(pos[:12, 0]) == [1] * 6 + [2] * 6
    assert np.all(pos[:12, 1:] == 0)
    with pytest.raises(SpanConflict):
        assign_positions(layout, [], [(1, (0, 7)), (2, (6, 12))], grid)


def _brute_tau(grid, boxes, max_person=None):
    gh, gw = grid
    out = np.zeros(gh * gw, dtype=int)
    for y in range(gh):
        for x in range(gw):
            best = 0
            for idx, b in boxes:
                if max_person is not None and idx > max_person:
                    continue
                if b.contains_cell(x, y) and idx > best:
                    best = idx
            out[y * gw + x] = best
    return out


def test_tau_brute_force_50_layouts():
    rng = np.random.default_rng(0)
    grid = (16, 16)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        boxes = []
        for i in range(1, n + 1):
            x0, y0 = rng.integers(0, 14, size=2)
            x1 = int(rng.integers(x0 + 1, 17))
            y1 = int(rng.integers(y0 + 1, 17))
            boxes.append((i, Box(int(x0), int(y0), x1, y1)))
        ctx_upto = n - 1
        layout = [Segment(TEXT, 6 * n), Segment(POSE_CTX, 256, ctx_upto), Segment(POSE, 256, n),
                  Segment(IMAGE, 256, n)]
        spans = [(i, (6 * (i - 1), 6 * i)) for i in range(1, n + 1)]
        pos = assign_positions(layout, boxes, spans, grid)
        t = 6 * n
        np.testing.assert_array_equal(pos[t:t + 256, 0], _brute_tau(grid, boxes, ctx_upto))
        np.testing.assert_array_equal(pos[t + 256:t + 512, 0], _brute_tau(grid, boxes))
        np.testing.assert_array_equal(pos[t + 512:, 0], _brute_tau(grid, boxes))
        # pose and image tokens share (x, y)
        np.testing.assert_array_equal(pos[t + 256:t + 512, 1:], pos[t + 512:, 1:])
        for i in range(1, n + 1):
            assert set(np.nonzero(pos[:t, 0] == i)[0]) == set(range(6 * (i - 1), 6 * i))


# ----------------------------------------------------------------- patchify

@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 4), gh=st.integers(1, 6), gw=st.integers(1, 6), p=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_patchify_round_trip(c, gh, gw, p, seed):
    x = np.random.default_rng(seed).standard_normal((2, c, gh * p, gw * p))
    tok = patchify(x, p)
    assert tok.shape == (2, gh * gw, c * p * p)
    np.testing.assert_array_equal(unpatchify(tok, (gh, gw), p, c), x)
    t = torch.from_numpy(x)
    assert torch.equal(unpatchify(patchify(t, p), (gh, gw), p, c), t)


def test_unpatchify_zero_and_single_patch():
    z = unpatchify(np.zeros((16, 12)), (4, 4), 2, 3)
    assert np.all(z == 0)
    tok = np.zeros((16, 12))
    tok[6] = 1.0  # row 1, column 2 of the 4x4 grid
    r = unpatchify(tok, (4, 4), 2, 3)
    ys, xs = np.nonzero(r.any(axis=0))
    assert set(ys) == {2, 3} and set(xs) == {4, 5}


def test_patchify_errors():
    with pytest.raises(ShapeMismatch):
        patchify(np.zeros((3, 5, 4)), 2)
    with pytest.raises(ShapeMismatch):
        unpatchify(np.zeros((15, 12)), (4, 4), 2, 3)


# ----------------------------------------------------------------- assembly

def test_stage_one_layout_and_counts():
    world = WorldConfig()
    spec = gen_scene(3, world.with_people(2))
    s1, s2 = decompose_stages(spec)
    z = np.zeros((3, 32, 32), np.float32)
    b1 = assemble_sequence(s1, z, z, 0.3, 0.9)
    assert [seg.kind for seg in b1.segments] == [TEXT, POSE, IMAGE]
    assert b1.pose.shape == (1, 256, 12)
    b2 = assemble_sequence(s2, z, z, 0.3, 0.9)
    assert [seg.kind for seg in b2.segments] == [TEXT, POSE_CTX, POSE, IMAGE]
    t = b2.t_mod[0]
    kinds = b2.kinds
    assert torch.all(t[kinds == POSE] == torch.tensor(0.3))
    assert torch.all(t[kinds == IMAGE] == torch.tensor(0.9))
    assert torch.all(t[(kinds == TEXT) | (kinds == POSE_CTX)] == 0)


def test_grid_of_64_tokens():
    world = WorldConfig(canvas=(16, 16), patch=2)
    spec = gen_scene(0, world)
    (s,) = decompose_stages(spec)
    z = np.zeros((3, 16, 16), np.float32)
    b = assemble_sequence(s, z, z, 0.5, 0.5)
    assert b.pose.shape[1] == 64 and b.image.shape[1] == 64


def test_context_tokens_are_clean_previous_pose():
    spec = gen_scene(3, WorldConfig(num_people=2))
    s2 = decompose_stages(spec)[1]
    z = np.zeros((3, 32, 32), np.float32)
    b = assemble_sequence(s2, z, z, 0.5, 0.5)
    np.testing.assert_array_equal(b.pose_ctx[0].numpy(), patchify(s2.context_pose, 2))


def test_drop_text_and_shape_errors():
    spec = gen_scene(3, WorldConfig(num_people=2))
    s1, s2 = decompose_stages(spec)
    z = np.zeros((1, 3, 32, 32), np.float32)
    b = assemble_batch([s1], z, z, [0.1], [0.1], drop_text=[True])
    assert torch.all(b.text_ids == NULL) and torch.all(b.global_ids == NULL)
    with pytest.raises(ShapeMismatch):
        assemble_batch([s1, s2], np.zeros((2, 3, 32, 32)), None, [0, 0], [0, 0])
    with pytest.raises(ShapeMismatch):
        assemble_batch([s1], np.zeros((1, 3, 16, 16)), None, [0], [0])
    with pytest.raises(ShapeMismatch):
        assemble_batch([s1], z, z, [0], [0], max_text=3)


def test_layout_invariant_across_stages():
    spec = gen_scene(5, WorldConfig(num_people=3))
    layouts = [stage_layout(s, (16, 16)) for s in decompose_stages(spec)]
    assert [seg.kind for seg in layouts[0]] == [TEXT, POSE, IMAGE]
    for lay in layouts[1:]:
        assert [seg.kind for seg in lay] == [TEXT, POSE_CTX, POSE, IMAGE]
        assert [seg.length for seg in lay[1:]] == [256] * 3


# ----------------------------------------------------------------- rope

def test_tables_shapes_and_frequencies():
    t = build_rope_tables(8, (4, 2, 2), 10000.0)
    assert len(t.freqs[0]) == 2
    for f in t.freqs:
        assert float(f[0]) == 1.0
        assert torch.all(f[1:] < f[:-1])
    t = build_rope_tables(32)
    for a, d in enumerate((8, 12, 12)):
        k = torch.arange(d // 2, dtype=torch.float64)
        torch.testing.assert_close(t.freqs[a], 10000.0 ** (-2 * k / d), rtol=0, atol=0)


@pytest.mark.parametrize("split", [(4, 2, 3), (4, 2, 4), (2, 2, 2)])
def test_invalid_split(split):
    with pytest.raises(InvalidSplit):
        build_rope_tables(8, split)


def test_origin_identity_and_norm():
    t = build_rope_tables(32)
    g = torch.Generator().manual_seed(0)
    v = torch.randn(10, 32, dtype=torch.float64, generator=g)
    zero = torch.zeros(10, 3, dtype=torch.long)
    assert torch.equal(apply_rope(v, zero, t), v)
    pos = torch.randint(0, 16, (10, 3), generator=g)
    out = apply_rope(v, pos, t)
    torch.testing.assert_close(out.norm(dim=-1), v.norm(dim=-1), rtol=0, atol=1e-12)


def _dense_rotation(pos, tables) -> torch.Tensor:
    """Block-diagonal rotation matrix built entry by entry."""
    ang = tables.angles(torch.as_tensor(pos)[None])[0]
    m = torch.zeros(tables.head_dim, tables.head_dim, dtype=torch.float64)
    for k, a in enumerate(ang.tolist()):
        c, s = np.cos(a), np.sin(a)
        m[2 * k, 2 * k], m[2 * k, 2 * k + 1] = c, -s
        m[2 * k + 1, 2 * k], m[2 * k + 1, 2 * k + 1] = s, c
    return m


def test_rotation_matches_dense_matrix():
    t = build_rope_tables(32)
    v = torch.randn(32, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    pos = [2, 5, 11]
    out = apply_rope(v[None], torch.tensor([pos]), t)[0]
    torch.testing.assert_close(out, _dense_rotation(pos, t) @ v, rtol=0, atol=1e-12)


@pytest.mark.parametrize("axis", [0, 1, 2, None])
def test_relative_shift_property(axis):
    t = build_rope_tables(32)
    rng = np.random.default_rng(axis if axis is not None else 7)
    worst = 0.0
    for _ in range(100):
        q = torch.from_numpy(rng.standard_normal(32))
        k = torch.from_numpy(rng.standard_normal(32))
        p1 = rng.integers(0, 20, 3)
        p2 = rng.integers(0, 20, 3)
        delta = np.zeros(3, dtype=np.int64)
        if axis is None:
            delta[:] = rng.integers(-10, 30, 3)
        else:
            delta[axis] = rng.integers(-10, 30)
        a = apply_rope(q[None], torch.from_numpy(p1[None]), t) @ apply_rope(k[None], torch.from_numpy(p2[None]), t).T
        b = (apply_rope(q[None], torch.from_numpy((p1 + delta)[None]), t)
             @ apply_rope(k[None], torch.from_numpy((p2 + delta)[None]), t).T)
        worst = max(worst, abs(float(a - b)))
    assert worst < 1e-9


def test_angle_additivity():
    t = build_rope_tables(32)
    v = torch.randn(4, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    p = torch.tensor([[1, 2, 3], [0, 5, 1], [3, 3, 3], [2, 0, 7]])
    p2 = torch.tensor([[2, 1, 0], [1, 1, 1], [0, 4, 2], [5, 5, 5]])
    torch.testing.assert_close(apply_rope(apply_rope(v, p, t), p2, t), apply_rope(v, p + p2, t),
                               rtol=0, atol=1e-12)


def test_tau_binding_logits():
    t = build_rope_tables(32)
    v = torch.randn(32, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def logit(tau_q, tau_k):
        q = apply_rope(v[None], torch.tensor([[tau_q, 0, 0]]), t)
        k = apply_rope(v[None], torch.tensor([[tau_k, 4, 6]]), t)
        return float(q @ k.T)

    torch.testing.assert_close(torch.tensor(logit(1, 1)), torch.tensor(logit(2, 2)),
                               rtol=0, atol=1e-12)
    assert abs(logit(1, 1) - logit(1, 2)) > 1e-6
