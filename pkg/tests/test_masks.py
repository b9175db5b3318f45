import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shotcast.harness.oracles import enumerate_visibility
from shotcast.masks import PackedSequence, build_cross_routing, build_tf_mask, cross_routing_frames
from shotcast.memory import ReceptiveField
from shotcast.stream import ShotSchedule


def test_single_chunk_sees_only_itself():
    m = build_tf_mask(1, 3)
    noisy = range(3, 6)
    for q in noisy:
        assert m.visible_keys(q) == [3, 4, 5]


def test_two_chunk_quadrants():
    L = 2
    m = build_tf_mask(2, L)
    # noisy chunk 2 -> clean chunk 1 + itself
    assert m.visible_keys(6) == [0, 1, 6, 7]
    # clean chunk 2 -> clean chunks 1..2
    assert m.visible_keys(2) == [0, 1, 2, 3]
    # clean chunk 1 -> itself only
    assert m.visible_keys(0) == [0, 1]


@pytest.mark.parametrize("N", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("L", [1, 2, 3])
def test_dense_mask_equals_enumerator(N, L):
    assert torch.equal(build_tf_mask(N, L).matrix, enumerate_visibility(N, L))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_routed_mask_equals_enumerator(N, L, seed):
    rng = np.random.default_rng(seed)
    routing = {}
    for i in range(1, N + 1):
        hist = tuple(f for f in range((i - 1) * L) if rng.random() < 0.5)
        routing[i] = ReceptiveField(i, (), hist, tuple(range((i - 1) * L, i * L)))
    got = build_tf_mask(N, L, routing).matrix
    want = enumerate_visibility(N, L, {i: set(f.history_frames) for i, f in routing.items()})
    assert torch.equal(got, want)


@given(st.integers(1, 5), st.integers(1, 3))
def test_no_leakage_and_clean_to_noisy_empty(N, L):
    m = build_tf_mask(N, L).matrix
    NL = N * L
    assert not m[:NL, NL:].any()
    for q in range(NL, 2 * NL):
        i = (q - NL) // L + 1
        for k in torch.nonzero(m[q]).flatten().tolist():
            if k < NL:
                assert k // L + 1 < i
            else:
                assert (k - NL) // L + 1 == i
    # noisy diagonal blocks are fully visible
    for i in range(N):
        block = m[NL + i * L: NL + (i + 1) * L, NL + i * L: NL + (i + 1) * L]
        assert block.all()


def test_routed_visible_set_is_field_intersect_past():
    fields = {3: [0, 2, 4, 7]}  # frame 7 belongs to chunk 3 itself and must not appear as history
    m = build_tf_mask(3, 3, fields)
    noisy_row = 2 * 9 - 3
    hist = [k for k in m.visible_keys(noisy_row) if k < 9]
    assert hist == [0, 2, 4]


def test_route_clean_switch():
    fields = {2: [0]}
    on = build_tf_mask(2, 2, fields, route_clean=True)
    off = build_tf_mask(2, 2, fields, route_clean=False)
    assert on.visible_keys(2) == [0, 2, 3]
    assert off.visible_keys(2) == [0, 1, 2, 3]
    # noisy side is routed either way
    assert on.visible_keys(6) == off.visible_keys(6) == [0, 6, 7]


def test_routing_to_missing_chunk_or_frame_rejected():
    with pytest.raises(ValueError):
        build_tf_mask(2, 2, {3: [0]})
    with pytest.raises(ValueError):
        build_tf_mask(2, 2, {2: [9]})


def test_ascii_rendering():
    art = build_tf_mask(2, 1).to_ascii().splitlines()
    assert art[0].split() == ["c1", "c2", "n1", "n2"]
    assert art[1].split() == ["c1", "#", ".", ".", "."]
    assert art[4].split() == ["n2", "#", ".", ".", "#"]


def test_layout_helpers():
    lay = PackedSequence(3, 2)
    assert lay.num_frames == 12
    assert list(lay.segment_frames(4)) == [6, 7]
    assert lay.chunk_of_segment(4) == 1 and lay.is_noisy(4)
    with pytest.raises(ValueError):
        lay.segment_frames(7)
    with pytest.raises(ValueError):
        PackedSequence(0, 1)


def test_cross_routing_single_shot():
    s = ShotSchedule.single(3, torch.zeros(16))
    assert set(build_cross_routing(4, s).values()) == {1}


def test_cross_routing_boundary_after_chunk_two():
    s = ShotSchedule.from_seeds(3, [6], [0, 1])
    r = build_cross_routing(4, s)
    assert {seg for seg, p in r.items() if p == 1} == {1, 2, 5, 6}
    assert {seg for seg, p in r.items() if p == 2} == {3, 4, 7, 8}


@given(st.integers(1, 6), st.lists(st.integers(1, 5), max_size=3, unique=True))
def test_clean_and_noisy_copies_share_prompt(N, bounds):
    s = ShotSchedule.from_seeds(2, sorted(b * 2 for b in bounds), list(range(len(bounds) + 1)))
    r = build_cross_routing(N, s)
    assert all(r[i] == r[N + i] for i in range(1, N + 1))
    per_frame = cross_routing_frames(N, 2, s)
    assert per_frame.shape == (4 * N,)
    assert per_frame[0] == 0
