import numpy as np
import pytest

from metricforge.errors import ContractError, DataError, ShapeError
from metricforge.model import (
    Embedding,
    ModelConfig,
    SEBlockParams,
    embed_batch,
    forward,
    forward_embed,
    init_params,
    load_checkpoint,
    normalize_rows,
    param_spec,
    save_checkpoint,
    se_block,
)
from metricforge.tensor import Tensor, backward, zero_grad

TINY = ModelConfig(stage_channels=(4, 8), blocks_per_stage=1, se_reduction=2,
                   embedding_dim=8, stem_pool=4, num_classes=5)


def _rand_crop(rng, batch=2):
    return rng.normal(size=(batch, 3, 300, 161))


def _zero_se(c, r):
    return SEBlockParams(
        conv_in_w=Tensor(np.zeros((c // r, c, 1, 1)), requires_grad=True),
        conv_in_b=Tensor(np.zeros(c // r), requires_grad=True),
        conv_out_w=Tensor(np.zeros((c, c // r, 1, 1)), requires_grad=True),
        conv_out_b=Tensor(np.zeros(c), requires_grad=True),
    )


def _rand_se(rng, c, r):
    return SEBlockParams(
        conv_in_w=Tensor(rng.normal(size=(c // r, c, 1, 1)), requires_grad=True),
        conv_in_b=Tensor(rng.normal(size=c // r), requires_grad=True),
        conv_out_w=Tensor(rng.normal(size=(c, c // r, 1, 1)), requires_grad=True),
        conv_out_b=Tensor(rng.normal(size=c), requires_grad=True),
    )


class TestSEBlock:
    def test_zero_params_give_one_point_five_x(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 5, 6)))
        out = se_block(x, _zero_se(4, 2))
        np.testing.assert_array_equal(out.data, 1.5 * x.data)

    def test_zero_input_gives_zero_output(self):
        out = se_block(Tensor(np.zeros((4, 3, 3))), _rand_se(np.random.default_rng(1), 4, 2))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_recomputation_oracle(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(8, 4, 5)))
        p = _rand_se(rng, 8, 4)
        out = se_block(x, p)
        # recompute the gate directly with plain numpy
        z = np.einsum("oc,chw->ohw", p.conv_in_w.data[:, :, 0, 0], x.data)
        z = np.maximum(z + p.conv_in_b.data[:, None, None], 0.0)
        m = np.einsum("oc,chw->ohw", p.conv_out_w.data[:, :, 0, 0], z) + p.conv_out_b.data[:, None, None]
        m = 1.0 / (1.0 + np.exp(-m))
        assert np.all((m > 0) & (m < 1))
        np.testing.assert_allclose(out.data - x.data, x.data * m, rtol=1e-10, atol=1e-12)

    def test_shape_preserved_for_random_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            r = int(rng.choice([1, 2, 4]))
            c = r * int(rng.integers(1, 5))
            h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            x = Tensor(rng.normal(size=(c, h, w)))
            assert se_block(x, _rand_se(rng, c, r)).shape == (c, h, w)

    def test_batched_input(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        assert se_block(x, _rand_se(rng, 4, 2)).shape == (3, 4, 2, 2)


class TestForward:
    def test_unit_norm_embeddings(self):
        rng = np.random.default_rng(5)
        params = init_params(TINY, 0)
        _, unit, _ = forward(Tensor(_rand_crop(rng)), TINY, params)
        np.testing.assert_allclose(np.linalg.norm(unit.data, axis=1), 1.0, atol=1e-9)

    def test_determinism(self):
        rng = np.random.default_rng(6)
        x = _rand_crop(rng)
        params = init_params(TINY, 1)
        a = embed_batch(x, TINY, params)
        b = embed_batch(x, TINY, params)
        np.testing.assert_array_equal(a, b)

    def test_no_cross_sample_coupling(self):
        rng = np.random.default_rng(7)
        x = _rand_crop(rng, batch=4)
        params = init_params(TINY, 2)
        base = embed_batch(x, TINY, params)
        perm = np.array([2, 0, 3, 1])
        shuffled = embed_batch(x[perm], TINY, params)
        np.testing.assert_allclose(shuffled, base[perm], rtol=1e-12, atol=1e-12)

    def test_logits_shape_and_guard(self):
        rng = np.random.default_rng(8)
        params = init_params(TINY, 3)
        _, _, logits = forward(Tensor(_rand_crop(rng)), TINY, params, want_logits=True)
        assert logits.shape == (2, 5)
        headless = ModelConfig(stage_channels=(4, 8), se_reduction=2, embedding_dim=8,
                               stem_pool=4, num_classes=0)
        p2 = init_params(headless, 0)
        with pytest.raises(ContractError):
            forward(Tensor(_rand_crop(rng)), headless, p2, want_logits=True)

    def test_gradients_reach_se_kernels(self):
        rng = np.random.default_rng(9)
        params = init_params(TINY, 4)
        _, unit, _ = forward(Tensor(_rand_crop(rng)), TINY, params)
        backward((unit * unit.data).sum())
        for name in ("stage2.se.conv_in.w", "stage2.se.conv_out.w"):
            g = params[name].grad
            assert g is not None and np.abs(g).max() > 0
        zero_grad(params)

    def test_forward_embed_single_crop(self):
        rng = np.random.default_rng(10)
        params = init_params(TINY, 5)
        emb = forward_embed(rng.normal(size=(3, 300, 161)), TINY, params)
        assert isinstance(emb, Embedding)
        assert emb.normalized
        assert emb.vector.shape == (8,)
        assert np.linalg.norm(emb.vector) == pytest.approx(1.0, abs=1e-9)
        with pytest.raises(ShapeError):
            forward_embed(rng.normal(size=(3, 299, 161)), TINY, params)


class TestInitParams:
    def test_same_seed_identical(self):
        a = init_params(TINY, 7)
        b = init_params(TINY, 7)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a = init_params(TINY, 7)
        b = init_params(TINY, 8)
        assert any(not np.array_equal(a[n].data, b[n].data) for n in a)

    def test_biases_zero_slopes_quarter(self):
        params = init_params(TINY, 0)
        np.testing.assert_array_equal(params["stem.conv.b"].data, 0.0)
        np.testing.assert_array_equal(params["stage2.prelu.slopes"].data, 0.25)

    def test_forward_at_init_is_finite(self):
        rng = np.random.default_rng(11)
        params = init_params(TINY, 12)
        raw, unit, logits = forward(Tensor(_rand_crop(rng)), TINY, params, want_logits=True)
        for t in (raw, unit, logits):
            assert np.isfinite(t.data).all()

    def test_spec_matches_params(self):
        spec = param_spec(TINY)
        params = init_params(TINY, 0)
        assert list(spec) == list(params)
        for name, shape in spec.items():
            assert params[name].shape == shape


class TestConfigValidation:
    def test_channels_divisible_by_reduction(self):
        with pytest.raises(ContractError):
            ModelConfig(stage_channels=(6, 8), se_reduction=4)

    def test_embedding_dim_floor(self):
        with pytest.raises(ContractError):
            ModelConfig(embedding_dim=1)


class TestCheckpoint:
    def test_round_trip_exact_embeddings(self, tmp_path):
        rng = np.random.default_rng(13)
        x = _rand_crop(rng)
        params = init_params(TINY, 6)
        before = embed_batch(x, TINY, params)
        save_checkpoint(tmp_path / "ck", TINY, params, features={"mode": "magnitude"})
        cfg2, params2, feats = load_checkpoint(tmp_path / "ck")
        assert cfg2 == TINY
        assert feats == {"mode": "magnitude"}
        after = embed_batch(x, cfg2, params2)
        np.testing.assert_array_equal(before, after)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = init_params(TINY, 0)
        save_checkpoint(tmp_path / "ck", TINY, params)
        blob = tmp_path / "ck" / "head.w.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_param_rejected(self, tmp_path):
        import json

        params = init_params(TINY, 0)
        save_checkpoint(tmp_path / "ck", TINY, params)
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        manifest["params"] = manifest["params"][:-1]
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "empty")


class TestNormalizeRows:
    def test_unit_rows(self):
        rng = np.random.default_rng(14)
        m = Tensor(rng.normal(size=(5, 7)))
        out = normalize_rows(m)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)
