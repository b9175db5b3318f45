import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shotcast.memory import KVMemoryStore
from shotcast.rope import RopeConfig, block_relative_positions, rotate, routed_span


def test_position_zero_is_identity():
    x = torch.randn(5, 2, 8)
    assert torch.equal(rotate(x, torch.zeros(5, dtype=torch.long)), x)


@given(st.integers(0, 10_000), st.integers(0, 200))
def test_rotation_preserves_norm(seed, pos):
    x = torch.randn(3, 4, 16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    y = rotate(x, torch.full((3,), pos))
    assert torch.allclose(y.norm(dim=-1), x.norm(dim=-1), atol=1e-6)


def test_two_dim_unit_vector():
    y = rotate(torch.tensor([[[1.0, 0.0]]], dtype=torch.float64), torch.tensor([1]), RopeConfig(head_dim=2))
    assert torch.allclose(y[0, 0], torch.tensor([math.cos(1.0), math.sin(1.0)], dtype=torch.float64))
    assert abs(y[0, 0, 0].item() - 0.5403) < 1e-4 and abs(y[0, 0, 1].item() - 0.8415) < 1e-4


@settings(max_examples=30)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 30), st.integers(0, 9999))
def test_dot_product_depends_only_on_offset(p, p2, shift, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 2, 16, generator=g, dtype=torch.float64)
    k = torch.randn(1, 2, 16, generator=g, dtype=torch.float64)
    a = (rotate(q, torch.tensor([p])) * rotate(k, torch.tensor([p2]))).sum(-1)
    b = (rotate(q, torch.tensor([p + shift])) * rotate(k, torch.tensor([p2 + shift]))).sum(-1)
    assert torch.allclose(a, b, atol=1e-9)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        RopeConfig(head_dim=7)
    with pytest.raises(ValueError):
        rotate(torch.zeros(2, 1, 3), torch.zeros(2, dtype=torch.long))
    with pytest.raises(ValueError):
        rotate(torch.zeros(2, 1, 4), torch.zeros(3, dtype=torch.long))
    with pytest.raises(ValueError):
        rotate(torch.zeros(1, 1, 4), torch.tensor([-1]))


def test_block_relative_examples():
    assert block_relative_positions(5, 3, 3) == list(range(17))
    assert routed_span(5, 3, 3) == 17 <= 61
    assert block_relative_positions(0, 0, 1) == [0]
    pos = block_relative_positions(2, 1, 3)
    assert pos[:2] == [0, 1] and pos[2:5] == [2, 3, 4] and pos[5:] == [5, 6, 7]
    with pytest.raises(ValueError):
        block_relative_positions(-1, 1, 1)


def test_span_check():
    cfg = RopeConfig()
    assert cfg.check_span(5, 3, 3) == 17
    with pytest.raises(ValueError):
        cfg.check_span(5, 20, 3)


def test_stored_keys_unrotated_and_reusable_at_any_position():
    store = KVMemoryStore()
    keys = torch.randn(3, 4, 2, 8)
    store.append_chunk(1, keys, torch.randn_like(keys))
    raw = store.keys_of(1).clone()
    a = rotate(raw[None], torch.tensor([[3]]).expand(1, 4))
    b = rotate(raw[None], torch.tensor([[9]]).expand(1, 4))
    assert not torch.allclose(a, b)
    assert torch.equal(store.keys_of(1), raw)
    assert torch.equal(raw, keys[1])
