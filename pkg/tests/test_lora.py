import numpy as np
import pytest

from olora import lora
from olora import tensor as T
from olora.errors import ConfigError, ShapeError, StateError
from olora.lora import LoRAPair, LoRAStack
from olora.tensor import Tensor


def make_stack(num_layers=1, dim=8):
    return LoRAStack(num_layers, dim)


def dense_delta(stack, site):
    """Brute-force oracle: materialized sum of B @ A over live pairs."""
    d = stack.dim
    out = np.zeros((d, d), dtype=np.float64)
    for pair in stack.pairs_at(site):
        out += pair.b.nd.astype(np.float64) @ pair.a.nd.astype(np.float64)
    return out


class TestAddPair:
    def test_empty_site(self):
        stack = make_stack()
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        pairs = stack.pairs_at((0, "q"))
        assert len(pairs) == 1
        assert not pairs[0].frozen
        ba = pairs[0].b.nd @ pairs[0].a.nd
        assert np.array_equal(ba, np.zeros((8, 8)))

    def test_add_after_freeze(self):
        stack = make_stack()
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        lora.freeze_pair(stack, (0, "q"))
        lora.add_pair(stack, (0, "q"), rank=2, seed=2)
        pairs = stack.pairs_at((0, "q"))
        assert len(pairs) == 2
        assert sum(not p.frozen for p in pairs) == 1

    def test_guard_against_double_trainable(self):
        stack = make_stack()
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        with pytest.raises(StateError):
            lora.add_pair(stack, (0, "q"), rank=2, seed=2)

    def test_rank_bound(self):
        stack = make_stack(dim=8)
        with pytest.raises(ConfigError):
            lora.add_pair(stack, (0, "q"), rank=3, seed=1)  # 3 > 8/4

    def test_frozen_pair_never_gets_gradients(self):
        stack = make_stack()
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        lora.freeze_pair(stack, (0, "q"))
        pair = stack.pairs_at((0, "q"))[0]
        w = Tensor(np.eye(8, dtype=np.float32))
        x = Tensor(np.ones((8, 1)), requires_grad=True)
        T.backward(T.tensor_sum(lora.apply(stack, (0, "q"), w, x)))
        assert pair.a.grad is None and pair.b.grad is None


class TestApply:
    def test_no_pairs(self):
        stack = make_stack(dim=2)
        w = Tensor([[1.0, 2.0], [3.0, 4.0]])
        x = Tensor([[1.0], [1.0]])
        out = lora.apply(stack, (0, "q"), w, x)
        assert np.allclose(out.nd, [[3.0], [7.0]])

    def test_hand_single_pair(self):
        # A = [[1, 0]], B = [[1], [0]]: delta maps e1 -> e1
        stack = make_stack(dim=2)
        stack.site((0, "q")).pairs.append(
            LoRAPair(a=Tensor([[1.0, 0.0]], requires_grad=True),
                     b=Tensor([[1.0], [0.0]], requires_grad=True), rank=1)
        )
        w = Tensor([[2.0, 0.0], [0.0, 2.0]])
        e1 = Tensor([[1.0], [0.0]])
        out = lora.apply(stack, (0, "q"), w, e1)
        assert np.allclose(out.nd, [[3.0], [0.0]])  # W e1 + e1

    def test_two_pairs_match_dense_oracle(self):
        rng = T.make_rng(5)
        stack = make_stack(dim=8)
        site = (0, "v")
        lora.add_pair(stack, site, rank=2, seed=10)
        pair = stack.trainable_pair(site)
        pair.b.data[:] = rng.standard_normal(pair.b.size).astype(np.float32)
        lora.freeze_pair(stack, site)
        lora.add_pair(stack, site, rank=2, seed=11)
        pair2 = stack.trainable_pair(site)
        pair2.b.data[:] = rng.standard_normal(pair2.b.size).astype(np.float32)

        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        x = Tensor(rng.standard_normal((8, 3)).astype(np.float32))
        got = lora.apply(stack, site, w, x).nd
        expect = (w.nd.astype(np.float64) + dense_delta(stack, site)) @ x.nd.astype(np.float64)
        assert np.allclose(got, expect, atol=1e-5)

        # order independence: reversing the pair list changes nothing material
        stack.site(site).pairs.reverse()
        got_rev = lora.apply(stack, site, w, x).nd
        assert np.allclose(got, got_rev, atol=1e-6)

    def test_apply_tokens_matches_apply(self):
        rng = T.make_rng(6)
        stack = make_stack(dim=8)
        lora.add_pair(stack, (0, "q"), rank=2, seed=3)
        stack.trainable_pair((0, "q")).b.data[:] = rng.standard_normal(16).astype(np.float32)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        cols = rng.standard_normal((8, 5)).astype(np.float32)
        col_out = lora.apply(stack, (0, "q"), w, Tensor(cols)).nd
        row_out = lora.apply_tokens(stack, (0, "q"), w, Tensor(cols.T)).nd
        assert np.allclose(col_out, row_out.T, atol=1e-5)

    def test_shape_mismatch(self):
        stack = make_stack(dim=4)
        with pytest.raises(ShapeError):
            lora.apply(stack, (0, "q"), Tensor(np.eye(4)), Tensor(np.zeros((3, 1))))


class TestFreezeAndMerge:
    def test_zero_delta_merge(self):
        stack = make_stack(dim=8)
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        w = Tensor(np.eye(8, dtype=np.float32))
        before = w.nd.copy()
        lora.freeze_and_merge(stack, (0, "q"), w)
        assert np.array_equal(w.nd, before)  # B = 0 so the delta is zero
        assert stack.pairs_at((0, "q")) == []
        assert stack.site((0, "q")).merged_count == 1

    def test_merge_preserves_outputs(self):
        rng = T.make_rng(9)
        stack = make_stack(dim=8)
        site = (0, "q")
        lora.add_pair(stack, site, rank=2, seed=4)
        stack.trainable_pair(site).b.data[:] = rng.standard_normal(16).astype(np.float32)
        stack.trainable_pair(site).a.data[:] = rng.standard_normal(16).astype(np.float32)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        x = Tensor(rng.standard_normal((8, 4)).astype(np.float32))
        before = lora.apply(stack, site, w, x).nd.copy()
        lora.freeze_and_merge(stack, site, w)
        after = lora.apply(stack, site, w, x).nd
        assert np.abs(before - after).max() < 1e-5

    def test_double_merge_errors(self):
        stack = make_stack(dim=8)
        lora.add_pair(stack, (0, "q"), rank=2, seed=1)
        w = Tensor(np.eye(8, dtype=np.float32))
        lora.freeze_and_merge(stack, (0, "q"), w)
        with pytest.raises(StateError):
            lora.freeze_and_merge(stack, (0, "q"), w)

    def test_live_pair_count_after_merge(self):
        stack = make_stack(dim=8)
        site = (0, "v")
        lora.add_pair(stack, site, rank=1, seed=1)
        lora.freeze_pair(stack, site)
        lora.add_pair(stack, site, rank=1, seed=2)
        w = Tensor(np.eye(8, dtype=np.float32))
        lora.freeze_and_merge(stack, site, w)  # merges both the frozen and trainable pair
        assert len(stack.pairs_at(site)) == 0
        assert stack.site(site).merged_count == 2
        lora.add_pair(stack, site, rank=1, seed=3)
        assert len(stack.pairs_at(site)) <= 1


class TestParamCount:
    def test_vit_b16_scale_count(self):
        assert lora.lora_param_count(12, 768, 4) == 147_456

    def test_desk_scale(self):
        assert lora.lora_param_count(2, 64, 4) == 2 * 2 * (64 * 4 + 4 * 64)
        assert lora.lora_param_count(2, 64, 4) == 2048

    def test_degenerate_rank(self):
        assert lora.lora_param_count(12, 768, 0) == 0


class TestSerialization:
    def test_round_trip(self):
        rng = T.make_rng(3)
        stack = make_stack(num_layers=2, dim=8)
        lora.add_pair(stack, (0, "q"), rank=2, seed=1, step=5)
        lora.freeze_pair(stack, (0, "q"))
        lora.add_pair(stack, (0, "q"), rank=2, seed=2, step=9)
        stack.trainable_pair((0, "q")).b.data[:] = rng.standard_normal(16).astype(np.float32)
        lora.add_pair(stack, (1, "v"), rank=1, seed=3)
        stack.site((1, "v")).merged_count = 4

        tensors = lora.stack_tensors(stack)
        clone = lora.stack_from_tensors(2, 8, tensors)
        for site in stack.sites():
            orig, back = stack.pairs_at(site), clone.pairs_at(site)
            assert len(orig) == len(back)
            for p, q in zip(orig, back):
                assert np.array_equal(p.a.nd, q.a.nd)
                assert np.array_equal(p.b.nd, q.b.nd)
                assert p.frozen == q.frozen
                assert p.created_at_step == q.created_at_step
            assert stack.site(site).merged_count == clone.site(site).merged_count
