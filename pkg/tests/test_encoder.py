import math

import numpy as np
import pytest

from mdtts.autodiff import Tape, Tensor, backward, mul, reduce_sum
from mdtts.encoder import (
    AttentionParams,
    RoutedFfnParams,
    EncoderParams,
    count_parameters,
    routed_ffn_forward,
    encoder_forward,
    iter_tensors,
    mhsa,
)
from mdtts.text import BOS_ID, EOS_ID, PAD_ID


def make_attn(hidden=2, heads=1, seed=0):
    return AttentionParams.init(hidden, heads, np.random.default_rng(seed))


class TestMhsa:
    def test_single_position_is_projected_value(self):
        params = make_attn(hidden=4, heads=2, seed=1)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 4)))
        out = mhsa(x, params)
        vs = [x.data @ w.data for w in params.wv]
        expected = np.concatenate(vs, axis=1) @ params.wo.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        # recompute the attention matrix independently and check each row
        params = make_attn(hidden=3, heads=1, seed=3)
        x = Tensor(np.random.default_rng(4).normal(size=(5, 3)))
        q = x.data @ params.wq[0].data
        k = x.data @ params.wk[0].data
        logits = q @ k.T / math.sqrt(params.d_k)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    def test_hand_computed_two_step_case(self):
        # T=2, H=2, one head, fixed weights; recomputed step by step in numpy
        params = AttentionParams(
            wq=[Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)],
            wk=[Tensor([[0.0, 1.0], [1.0, 0.0]], requires_grad=True)],
            wv=[Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)],
            wo=Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True),
            heads=1, d_k=2)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = x @ params.wq[0].data
        k = x @ params.wk[0].data
        v = x @ params.wv[0].data
        scores = (q @ k.T) / math.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        expected = (attn @ v) @ params.wo.data
        out = mhsa(Tensor(x), params)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_masked_positions_excluded(self):
        params = make_attn(hidden=2, heads=1, seed=5)
        rng = np.random.default_rng(6)
        x2 = rng.normal(size=(2, 2))
        x3 = np.vstack([x2, rng.normal(size=(1, 2))])
        out_masked = mhsa(Tensor(x3), params, mask=np.array([False, False, True]))
        out_plain = mhsa(Tensor(x2), params)
        assert np.allclose(out_masked.data[:2], out_plain.data, atol=1e-9)

    def test_all_masked_rejected(self):
        params = make_attn()
        with pytest.raises(ValueError, match="masked"):
            mhsa(Tensor(np.zeros((2, 2))), params, mask=np.array([True, True]))


class TestRoutedFfn:
    def _params(self, hidden=3, inner=4, seed=0):
        return RoutedFfnParams.init(hidden, inner, np.random.default_rng(seed))

    def test_zero_public_leaves_private_only(self):
        params = self._params()
        for t in iter_tensors(params.ffn_public):
            t.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
        for did in (0, 1, 2):
            out = routed_ffn_forward(x, did, params)
            # gelu(0)*w2 + b2 with all-zero params is exactly zero
            expected = params.ffn_private[did](x).data
            assert np.allclose(out.data, expected, atol=1e-12)

    def test_different_branches_differ(self):
        params = self._params(seed=2)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 3)))
        out0 = routed_ffn_forward(x, 0, params).data
        out1 = routed_ffn_forward(x, 1, params).data
        assert not np.allclose(out0, out1)

    def test_identical_branches_make_routing_invisible(self):
        params = self._params(seed=4)
        src = params.ffn_private[0]
        for ffn in params.ffn_private[1:]:
            for dst, s in zip(iter_tensors(ffn), iter_tensors(src)):
                dst.data = s.data.copy()
        x = Tensor(np.random.default_rng(5).normal(size=(4, 3)))
        outs = [routed_ffn_forward(x, did, params).data for did in (0, 1, 2)]
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[1], outs[2])

    def test_exactly_one_private_evaluation_per_block(self):
        params = self._params(seed=6)
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3)))
        trace = []
        routed_ffn_forward(x, 2, params, block_index=5, trace=trace)
        assert trace == [(5, 2)]

    def test_invalid_did(self):
        with pytest.raises(ValueError):
            routed_ffn_forward(Tensor(np.zeros((1, 3))), 3, self._params())

    def test_parameter_count_is_public_plus_three_private(self):
        hidden, inner = 5, 7
        params = self._params(hidden=hidden, inner=inner)
        one_ffn = hidden * inner + inner + inner * hidden + hidden
        assert count_parameters(params) == 4 * one_ffn
        assert count_parameters(params.ffn_public) == one_ffn


def make_encoder(vocab=12, hidden=4, heads=2, inner=6, blocks=2, ddim=5, seed=0,
                 routed=True):
    return EncoderParams.init(vocab, hidden, heads, inner, blocks, ddim,
                              np.random.default_rng(seed), routed=routed)


class TestPerLayerRouting:
    def test_mixed_routing_flags(self):
        params = make_encoder(blocks=3, routed=[True, False, True])
        assert [b.routed_ffn.routed for b in params.blocks] == [True, False, True]
        trace = []
        out = encoder_forward([BOS_ID, 4, EOS_ID], 2, params, trace=trace)
        assert out.shape == (3, 4)
        # only the routed blocks report a private-branch evaluation
        assert trace == [(0, 2), (2, 2)]

    def test_flag_count_must_match_blocks(self):
        with pytest.raises(ValueError, match="routing flags"):
            make_encoder(blocks=2, routed=[True])


class TestEncoderForward:
    def test_zero_blocks_is_fused_embedding(self):
        params = make_encoder(blocks=0, seed=1)
        ids = [BOS_ID, 4, 5, EOS_ID]
        out = encoder_forward(ids, 0, params)
        from mdtts.dialect import embed_dialect, fuse
        from mdtts.autodiff import gather_rows

        expected = fuse(gather_rows(params.embedding, ids),
                        embed_dialect(0, params.dialect_table),
                        params.fusion)
        assert np.array_equal(out.data, expected.data)

    def test_dialect_changes_output(self):
        for seed in range(5):
            params = make_encoder(seed=seed)
            ids = [BOS_ID, 4, 6, EOS_ID]
            a = encoder_forward(ids, 0, params).data
            b = encoder_forward(ids, 2, params).data
            assert not np.allclose(a, b)

    def test_routing_trace_one_event_per_block(self):
        params = make_encoder(blocks=3, seed=2)
        trace = []
        encoder_forward([BOS_ID, 4, EOS_ID], 1, params, trace=trace)
        assert trace == [(0, 1), (1, 1), (2, 1)]

    def test_pad_gets_no_gradient_when_masked(self):
        params = make_encoder(seed=3)
        ids = [BOS_ID, 4, EOS_ID, PAD_ID]
        mask = np.array([False, False, False, True])
        # loss over unmasked rows only
        w = np.ones((4, 4))
        w[3] = 0.0
        with Tape() as tape:
            out = encoder_forward(ids, 0, params, mask=mask)
            loss = reduce_sum(mul(out, Tensor(w)))
        grads = backward(tape, loss)
        emb_grad = grads[params.embedding.id].data
        assert np.array_equal(emb_grad[PAD_ID], np.zeros(4))
        assert not np.array_equal(emb_grad[4], np.zeros(4))

    def test_routing_isolation_gradients(self):
        # a forward/backward under dialect j must not touch other branches
        params = make_encoder(seed=4)
        with Tape() as tape:
            out = encoder_forward([BOS_ID, 5, EOS_ID], 1, params)
            loss = reduce_sum(out)
        grads = backward(tape, loss)
        for block in params.blocks:
            for t in iter_tensors(block.routed_ffn.ffn_private[1]):
                assert t.id in grads
            for other in (0, 2):
                for t in iter_tensors(block.routed_ffn.ffn_private[other]):
                    assert t.id not in grads

    def test_equal_branches_and_zero_fusion_make_did_invisible(self):
        params = make_encoder(seed=5)
        params.fusion.weight.data[:] = 0.0
        params.fusion.bias.data[:] = 0.0
        for block in params.blocks:
            src = block.routed_ffn.ffn_private[0]
            for ffn in block.routed_ffn.ffn_private[1:]:
                for dst, s in zip(iter_tensors(ffn), iter_tensors(src)):
                    dst.data = s.data.copy()
        ids = [BOS_ID, 4, 7, EOS_ID]
        outs = [encoder_forward(ids, did, params).data for did in (0, 1, 2)]
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[1], outs[2])


def test_mhsa_and_routed_ffn_gradients_match_finite_differences():
    from mdtts.autodiff import numeric_gradient

    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        attn = AttentionParams.init(4, 2, rng)
        block_ffn = RoutedFfnParams.init(4, 5, rng)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        did = seed % 3

        def f():
            return reduce_sum(
                mul(routed_ffn_forward(mhsa(x, attn), did, block_ffn), Tensor(w))).item()

        with Tape() as tape:
            loss = reduce_sum(
                mul(routed_ffn_forward(mhsa(x, attn), did, block_ffn), Tensor(w)))
        grads = backward(tape, loss)
        check = [x, attn.wq[0], attn.wv[1], attn.wo,
                 block_ffn.ffn_public.w1, block_ffn.ffn_private[did].w2]
        for t in check:
            fd = numeric_gradient(f, t)
            an = grads[t.id].data
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-4)
            assert np.max(np.abs(fd - an) / denom) < 1e-4
