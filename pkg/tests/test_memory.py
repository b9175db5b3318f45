import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shotcast.harness.oracles import loop_mean_descriptor, topk_by_sort
from shotcast.memory import (
    KVMemoryStore,
    RouterConfig,
    assemble_receptive_field,
    chunk_query_descriptor,
    frame_descriptor,
    route,
    route_score,
    select_topk,
)


def g(seed=0):
    return torch.Generator().manual_seed(seed)


# descriptors

def test_descriptor_of_identical_tokens():
    tok = torch.randn(2, 4, generator=g())
    assert torch.equal(frame_descriptor(tok.expand(5, 2, 4)), tok)
    assert torch.equal(frame_descriptor(tok[None]), tok)


def test_descriptor_matches_loop_mean():
    keys = torch.randn(7, 3, 4, generator=g(1), dtype=torch.float64)
    assert torch.allclose(frame_descriptor(keys), loop_mean_descriptor(keys), atol=1e-7)
    with pytest.raises(ValueError):
        frame_descriptor(torch.zeros(0, 2, 2))


def test_query_descriptor():
    v = torch.randn(2, 4, generator=g(2), dtype=torch.float64)
    assert torch.equal(chunk_query_descriptor(v.expand(3, 4, 2, 4)), v)
    assert torch.equal(chunk_query_descriptor(v[None, None]), v)
    q = torch.randn(3, 4, 2, 4, generator=g(3), dtype=torch.float64)
    assert torch.allclose(chunk_query_descriptor(q), loop_mean_descriptor(q.reshape(12, 2, 4)), atol=1e-7)


def test_route_score():
    a = torch.tensor([[1.0, 0.0]])
    b = torch.tensor([[0.0, 1.0]])
    assert route_score(a, b) == 0.0
    d = torch.randn(2, 4, generator=g(4))
    d = d / d.norm()
    assert abs(route_score(d, d) - 1.0) < 1e-6
    q = torch.randn(2, 4, generator=g(5), dtype=torch.float64)
    assert abs(route_score(q, d.double()) - float(q.flatten() @ d.double().flatten())) < 1e-7
    with pytest.raises(ValueError):
        route_score(q, q[:1])


# top-k

def test_topk_small_cases():
    assert select_topk({}, 5) == []
    assert select_topk({4: 0.1, 1: 0.3, 9: -1.0}, 5) == [1, 4, 9]
    assert select_topk({4: 1.0, 1: 1.0, 9: 1.0}, 2) == [1, 4]
    assert select_topk({4: 1.0}, 0) == []
    with pytest.raises(ValueError):
        select_topk({}, -1)


def test_topk_matches_sort_oracle_on_many_caches():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 201))
        frames = rng.permutation(600)[:n].tolist()
        scores = (rng.integers(-3, 4, size=n) * 0.5).tolist()
        assert select_topk(dict(zip(frames, scores)), 5) == topk_by_sort(frames, scores, 5)


@given(st.dictionaries(st.integers(0, 500), st.floats(-1e6, 1e6, allow_nan=False), max_size=60), st.integers(0, 10))
def test_topk_properties(scores, k):
    sel = select_topk(scores, k)
    assert sel == sorted(sel)
    assert len(sel) == min(k, len(scores))
    if sel:
        worst_in = min(scores[f] for f in sel)
        for f, s in scores.items():
            if f not in sel:
                assert s < worst_in or (s == worst_in and f > min(x for x in sel if scores[x] == worst_in))


# store and routing

def filled_store(chunks, L=3, P=4, H=2, D=4, seed=0):
    store = KVMemoryStore()
    gen = g(seed)
    for i in range(1, chunks + 1):
        k = torch.randn(L, P, H, D, generator=gen)
        store.append_chunk(i, k, torch.randn(L, P, H, D, generator=gen))
    return store


def test_store_invariants():
    store = filled_store(4)
    assert len(store) == 12
    assert store.frame_ids == list(range(12))
    assert store.chunk_ids == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
    for f in store.frame_ids:
        assert torch.equal(store.descriptor_of(f), store.keys_of(f).mean(dim=0))
    with pytest.raises(ValueError):
        store.append_chunk(2, torch.zeros(3, 4, 2, 4), torch.zeros(3, 4, 2, 4))


def test_store_detaches_and_caps():
    k = torch.randn(2, 3, 1, 2, requires_grad=True)
    store = KVMemoryStore(max_frames=4)
    for i in range(1, 5):
        store.append_chunk(i, k * i, k * i)
    assert len(store) == 4 and store.frame_ids == [4, 5, 6, 7]
    assert not store.keys_of(7).requires_grad
    kk, vv = store.gather([5, 7])
    assert torch.allclose(kk[1], (k * 4)[1].detach())


def test_store_state_roundtrip():
    store = filled_store(3)
    back = KVMemoryStore.from_state(store.state())
    assert back.frame_ids == store.frame_ids and back.chunk_ids == store.chunk_ids
    assert torch.equal(back.descriptors, store.descriptors)
    assert len(KVMemoryStore.from_state(KVMemoryStore().state())) == 0


def test_first_chunk_sees_only_itself():
    f = assemble_receptive_field(1, KVMemoryStore(), W=3, k=5, L=3)
    assert f.memory == () and f.window == () and f.current == (0, 1, 2)


def test_early_chunk_has_window_only():
    store = filled_store(2)
    f = assemble_receptive_field(3, store, W=3, k=5, query=torch.randn(2, 4))
    assert f.memory == () and f.window == tuple(range(6))


def test_chunk_twenty_uses_score_oracle():
    store = filled_store(19, seed=3)
    q = torch.randn(2, 4, generator=g(9))
    f = assemble_receptive_field(20, store, W=3, k=5, query=q)
    assert f.window == tuple(range(48, 57))
    hist = [fr for fr, c in zip(store.frame_ids, store.chunk_ids) if c <= 16]
    scores = [route_score(q, store.descriptor_of(fr)) for fr in hist]
    assert list(f.memory) == topk_by_sort(hist, scores, 5)
    assert set(f.memory).isdisjoint(f.window) and max(f.memory) < min(f.window)
    assert f.num_frames == 17


def test_policies_differ_only_in_memory_selection():
    store = filled_store(10, seed=4)
    q = torch.randn(2, 4, generator=g(1))
    camr = assemble_receptive_field(11, store, 3, 5, q, policy="camr")
    sink = assemble_receptive_field(11, store, 3, 5, q, policy="sink")
    none = assemble_receptive_field(11, store, 3, 5, q, policy="none")
    assert camr.window == sink.window == none.window
    assert sink.memory == (0, 1, 2, 3, 4)
    assert none.memory == ()
    assert len(camr.memory) == 5


def test_routing_is_deterministic_and_parameter_free():
    store = filled_store(8, seed=2)
    q = torch.randn(2, 4, generator=g(7))
    a = assemble_receptive_field(9, store, 3, 5, q)
    b = assemble_receptive_field(9, store, 3, 5, q.clone())
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 4), st.integers(0, 7), st.integers(1, 3))
def test_receptive_field_bounded(i, W, k, L):
    store = filled_store(i - 1, L=L, seed=i) if i > 1 else KVMemoryStore()
    f = route(i, L, torch.randn(2, 4), store.frame_ids, store.chunk_ids, store.descriptors,
              RouterConfig(W=W, k=k))
    assert len(f.memory) <= k
    assert f.num_frames <= k + W * L + L
    assert set(f.memory).isdisjoint(f.window)
    if f.memory and f.window:
        assert max(f.memory) < min(f.window)


def test_route_rejects_future_history_and_bad_config():
    with pytest.raises(ValueError):
        route(2, 1, None, [0, 1], [1, 2], None, RouterConfig())
    with pytest.raises(ValueError):
        RouterConfig(policy="random")
    with pytest.raises(ValueError):
        RouterConfig(k=-1)
