import numpy as np
import pytest

from mdtts.autodiff import Tape, Tensor, backward, numeric_gradient, reduce_sum, mul
from mdtts.dialect import (
    DialectEmbeddingTable,
    FusionProjection,
    dialect_id,
    dialect_name,
    embed_dialect,
    fuse,
)


class TestDialectId:
    def test_canonical_names(self):
        assert dialect_id("u-tsang") == 0
        assert dialect_id("amdo") == 1
        assert dialect_id("kham") == 2

    def test_aliases_and_case(self):
        assert dialect_id("Ü-Tsang") == 0
        assert dialect_id("utsang") == 0
        assert dialect_id("AMDO") == 1

    def test_unknown_rejected_with_valid_names(self):
        with pytest.raises(ValueError, match="u-tsang, amdo, kham"):
            dialect_id("lhasa")

    def test_name_round_trip(self):
        for did in (0, 1, 2):
            assert dialect_id(dialect_name(did)) == did


class TestEmbedDialect:
    def test_unit_norm_for_all_dialects(self):
        rng = np.random.default_rng(3)
        table = DialectEmbeddingTable.init(128, rng)
        for did in (0, 1, 2):
            h = embed_dialect(did, table)
            assert h.shape == (1, 128)
            assert abs(np.linalg.norm(h.data) - 1.0) < 1e-12

    def test_axis_row(self):
        weights = np.zeros((3, 4))
        weights[0, 0] = 2.0
        weights[1] = weights[2] = [0, 1, 0, 0]
        table = DialectEmbeddingTable(Tensor(weights, requires_grad=True))
        h = embed_dialect(0, table)
        assert np.allclose(h.data, [[1.0, 0.0, 0.0, 0.0]])

    def test_distinct_rows_give_distinct_embeddings(self):
        for seed in range(10):
            table = DialectEmbeddingTable.init(16, np.random.default_rng(seed))
            h0 = embed_dialect(0, table).data.ravel()
            h1 = embed_dialect(1, table).data.ravel()
            assert float(h0 @ h1) < 1.0 - 1e-6

    def test_zero_row_rejected(self):
        weights = np.ones((3, 4))
        weights[1] = 0.0
        table = DialectEmbeddingTable(Tensor(weights, requires_grad=True))
        with pytest.raises(ValueError, match="all-zero"):
            embed_dialect(1, table)

    def test_invalid_id_rejected(self):
        table = DialectEmbeddingTable.init(8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            embed_dialect(3, table)


class TestFuse:
    def _setup(self, seed=0, hidden=4, emb=6):
        rng = np.random.default_rng(seed)
        table = DialectEmbeddingTable.init(emb, rng)
        proj = FusionProjection.init(emb, hidden, rng)
        return table, proj

    def test_zero_projection_is_identity(self):
        table, proj = self._setup()
        proj.weight.data[:] = 0.0
        proj.bias.data[:] = 0.0
        h = Tensor(np.random.default_rng(1).normal(size=(5, 4)))
        out = fuse(h, embed_dialect(0, table), proj)
        assert np.array_equal(out.data, h.data)

    def test_zero_text_gives_projected_vector_every_row(self):
        table, proj = self._setup()
        h = Tensor(np.zeros((3, 4)))
        h_did = embed_dialect(2, table)
        out = fuse(h, h_did, proj)
        expected = h_did.data @ proj.weight.data + proj.bias.data
        for row in out.data:
            assert np.allclose(row, expected.ravel())

    def test_hand_arithmetic(self):
        # projected dialect vector (0.5, -1) added to [[1, 1]]
        table = DialectEmbeddingTable(
            Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], requires_grad=True))
        proj = FusionProjection(
            weight=Tensor([[0.5, -1.0], [0.0, 0.0]], requires_grad=True),
            bias=Tensor([0.0, 0.0], requires_grad=True))
        out = fuse(Tensor([[1.0, 1.0]]), embed_dialect(0, table), proj)
        assert np.allclose(out.data, [[1.5, 0.0]])

    def test_linear_in_text_exact(self):
        # axis-aligned embedding + integer weights keep every sum exact,
        # so the linearity identity can be asserted bitwise
        weights = np.zeros((3, 6))
        weights[0, 0] = weights[1, 1] = weights[2, 2] = 2.0
        table = DialectEmbeddingTable(Tensor(weights, requires_grad=True))
        rng = np.random.default_rng(7)
        proj = FusionProjection(
            weight=Tensor(rng.integers(-4, 5, size=(6, 4)).astype(float),
                          requires_grad=True),
            bias=Tensor(rng.integers(-4, 5, size=4).astype(float),
                        requires_grad=True))
        x = Tensor(rng.integers(-5, 6, size=(4, 4)).astype(float))
        zero = Tensor(np.zeros((4, 4)))
        h_did = embed_dialect(1, table)
        fx = fuse(x, h_did, proj).data
        f0 = fuse(zero, h_did, proj).data
        assert np.array_equal(fx - f0, x.data)

    def test_changing_dialect_changes_output(self):
        table, proj = self._setup(seed=4)
        h = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
        outs = [fuse(h, embed_dialect(d, table), proj).data for d in (0, 1, 2)]
        assert not np.allclose(outs[0], outs[1])
        assert not np.allclose(outs[1], outs[2])

    def test_dimension_mismatch_rejected(self):
        table, proj = self._setup(hidden=4)
        with pytest.raises(ValueError):
            fuse(Tensor(np.zeros((2, 7))), embed_dialect(0, table), proj)

    def test_concat_mode_runs_and_differs_by_dialect(self):
        rng = np.random.default_rng(9)
        table = DialectEmbeddingTable.init(6, rng)
        proj = FusionProjection.init(6, 4, rng, mode="concat")
        h = Tensor(rng.normal(size=(3, 4)))
        a = fuse(h, embed_dialect(0, table), proj)
        b = fuse(h, embed_dialect(1, table), proj)
        assert a.shape == (3, 4)
        assert not np.allclose(a.data, b.data)


def test_fusion_gradients_match_finite_differences():
    # covers embed (normalize) -> project -> broadcast add as one layer
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        table = DialectEmbeddingTable.init(5, rng)
        proj = FusionProjection.init(5, 3, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = rng.normal(size=(4, 3))
        did = seed % 3

        def f():
            return reduce_sum(
                mul(fuse(x, embed_dialect(did, table), proj), Tensor(w))).item()

        with Tape() as tape:
            loss = reduce_sum(
                mul(fuse(x, embed_dialect(did, table), proj), Tensor(w)))
        grads = backward(tape, loss)
        for t in (x, table.weights, proj.weight, proj.bias):
            fd = numeric_gradient(f, t)
            an = grads[t.id].data if t.id in grads else np.zeros(t.shape)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-4)
            assert np.max(np.abs(fd - an) / denom) < 1e-4
