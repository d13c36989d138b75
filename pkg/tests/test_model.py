import numpy as np
import pytest

from cnpaint import autograd as ag
from cnpaint.autograd import Tensor
from cnpaint.model import (
    Checkpoint,
    MDTModel,
    ModelConfig,
    attention_paab,
    freq_embedding,
    lambda_schedule,
    load_checkpoint,
    model_from_checkpoint,
    paab_scores,
    save_checkpoint,
    sinusoidal_positions,
)

TINY = ModelConfig(layers=2, feature_dim=16, heads=2, num_classes=2, seq_len=8)


def tiny_model(seed=0, dtype=np.float64):
    return MDTModel(TINY, np.random.default_rng(seed), dtype=dtype)


def tiny_inputs(seed=1, batch=3):
    rng = np.random.default_rng(seed)
    L = TINY.seq_len
    mask = (rng.uniform(0, 1, (batch, L)) < 0.5).astype(np.float64)
    s = rng.uniform(0, 1, (batch, L, 8))
    s_ctx = s * mask[..., None]
    s_p = rng.standard_normal((batch, L, 8)) * (1 - mask[..., None])
    ids = [0, 1, None][:batch]
    logsnr = rng.uniform(-15, 15, batch)
    return s_p, s_ctx, mask, ids, logsnr


def randomize(model, scale=0.05, seed=9):
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = (t.data + rng.standard_normal(t.data.shape) * scale).astype(t.data.dtype)


class TestConfig:
    def test_presets(self):
        assert (ModelConfig.small().layers, ModelConfig.small().feature_dim,
                ModelConfig.small().heads) == (6, 576, 6)
        assert (ModelConfig.base().layers, ModelConfig.base().feature_dim,
                ModelConfig.base().heads) == (8, 768, 12)
        assert (ModelConfig.large().layers, ModelConfig.large().feature_dim,
                ModelConfig.large().heads) == (12, 768, 12)

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=1, feature_dim=10, heads=3)

    def test_roundtrip(self):
        cfg = ModelConfig.small(num_classes=5, seq_len=100)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbeddings:
    def test_positions_shape_and_range(self):
        pe = sinusoidal_positions(360, 64)
        assert pe.shape == (360, 64)
        assert np.abs(pe).max() <= 1.0

    def test_freq_embedding_shape(self):
        assert freq_embedding([-15.0, 0.0, 15.0]).shape == (3, 256)

    def test_freq_embedding_distinct_on_grid(self):
        grid = np.linspace(-15, 15, 601)
        emb = freq_embedding(grid)
        for i in range(0, 600, 37):
            d = np.abs(emb - emb[i]).sum(axis=1)
            d[i] = np.inf
            assert d.min() > 1e-6


class TestLambdaSchedule:
    def test_endpoints_exact(self):
        assert lambda_schedule(15.0, 0.0, 0.5) == 0.5
        assert lambda_schedule(-15.0, 0.0, 0.5) == 0.0

    def test_midpoint_and_clamp(self):
        assert lambda_schedule(0.0, 0.0, 0.5) == 0.25
        assert lambda_schedule(99.0, 0.1, 0.5) == 0.5
        assert lambda_schedule(-99.0, 0.1, 0.5) == 0.1

    def test_monotone(self):
        xs = np.linspace(-20, 20, 101)
        ys = lambda_schedule(xs, 0.0, 0.5)
        assert (np.diff(ys) >= 0).all()


class TestPaab:
    def test_rows_stochastic(self):
        rng = np.random.default_rng(0)
        P = paab_scores(rng.uniform(0, 1, (4, 12, 2)))
        assert P.shape == (4, 12, 12)
        assert np.allclose(P.sum(axis=-1), 1.0, atol=1e-6)

    def test_degenerate_uniform(self):
        P = paab_scores(np.full((6, 2), 0.3))
        assert np.allclose(P, 1.0 / 6)

    def test_two_point_example(self):
        # squared distance 1 -> softmax(0, -1) rows
        P = paab_scores(np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert np.allclose(P[0], [0.7311, 0.2689], atol=1e-4)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(0, 1, (10, 2))
        perm = rng.permutation(10)
        P = paab_scores(pos)
        assert np.allclose(paab_scores(pos[perm]), P[np.ix_(perm, perm)], atol=1e-12)


class TestAttentionPaab:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.q = Tensor(rng.standard_normal((5, 4)))
        self.k = Tensor(rng.standard_normal((5, 4)))
        self.v = Tensor(rng.standard_normal((5, 4)))
        self.P = paab_scores(rng.uniform(0, 1, (5, 2)))

    def test_rows_sum_to_one(self):
        for lam in (0.0, 0.25, 0.5, 1.0):
            _, sigma = attention_paab(self.q, self.k, self.v, self.P, lam)
            assert np.allclose(sigma.data.sum(axis=-1), 1.0, atol=1e-6), lam

    def test_lambda_zero_is_standard_attention(self):
        out, sigma = attention_paab(self.q, self.k, self.v, self.P, 0.0)
        scores = self.q.data @ self.k.data.T / 2.0
        expect = ag.softmax(Tensor(scores)).data
        assert np.allclose(sigma.data, expect, atol=1e-12)

    def test_lambda_one_ignores_content(self):
        out1, _ = attention_paab(self.q, self.k, self.v, self.P, 1.0)
        rng = np.random.default_rng(3)
        q2 = Tensor(rng.standard_normal((5, 4)))
        k2 = Tensor(rng.standard_normal((5, 4)))
        out2, _ = attention_paab(q2, k2, self.v, self.P, 1.0)
        assert np.allclose(out1.data, out2.data, atol=1e-12)
        assert np.allclose(out1.data, self.P @ self.v.data, atol=1e-12)

    def test_degenerate_positions_uniform_rows(self):
        P = paab_scores(np.full((5, 2), 0.5))
        _, sigma = attention_paab(self.q, self.k, self.v, P, 1.0)
        assert np.allclose(sigma.data, 1.0 / 5)


class TestModelForward:
    def test_output_shape_and_determinism(self):
        m = tiny_model()
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs()
        randomize(m)
        a = m(s_p, s_ctx, mask, ids, logsnr)
        b = m(s_p, s_ctx, mask, ids, logsnr)
        assert a.shape == (3, 8, 8)
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("preset", ["small", "base", "large"])
    def test_variant_output_shapes(self, preset):
        cfg = getattr(ModelConfig, preset)(num_classes=2, seq_len=12)
        m = MDTModel(cfg, np.random.default_rng(0))
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs(batch=1)
        zeros = np.zeros((1, 12, 8))
        out = m(zeros, zeros, np.ones((1, 12)), [0], [1.0])
        assert out.shape == (1, 12, 8)

    def test_init_predicts_zero(self):
        m = tiny_model()
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs()
        assert np.abs(m(s_p, s_ctx, mask, ids, logsnr).data).max() == 0.0

    def test_init_output_is_head_of_embedding_stream(self):
        # gates start at zero: inner attention/MLP weights cannot reach the
        # output, which equals head(embedding + positions)
        m = tiny_model()
        rng = np.random.default_rng(4)
        m.params["head.w"].data = rng.standard_normal((16, 8))
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs()
        out1 = m(s_p, s_ctx, mask, ids, logsnr).data.copy()

        e = m.embed_inputs(s_p, s_ctx).data
        expect = e @ m.params["head.w"].data + m.params["head.b"].data
        assert np.allclose(out1, expect, atol=1e-12)

        for name, t in m.params.items():
            if ".attn." in name or ".mlp." in name:
                t.data = rng.standard_normal(t.data.shape)
        out2 = m(s_p, s_ctx, mask, ids, logsnr).data
        assert np.array_equal(out1, out2)

    def test_embed_selector_semantics(self):
        m = tiny_model()
        L = TINY.seq_len
        rng = np.random.default_rng(5)
        ctx1 = rng.uniform(0, 1, (1, L, 8))
        ctx2 = rng.uniform(0, 1, (1, L, 8))
        zeros = np.zeros((1, L, 8))
        e1 = m.embed_inputs(zeros, ctx1).data
        e2 = m.embed_inputs(zeros, ctx2).data
        assert not np.allclose(e1, e2)  # context drives the embedding
        p1 = m.embed_inputs(ctx1, zeros).data
        assert not np.allclose(e1, p1)  # the two streams use different maps

    def test_permutation_equivariance_without_positions(self):
        m = tiny_model()
        randomize(m)
        m.pe = np.zeros_like(m.pe)
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs(batch=1)
        perm = np.random.default_rng(6).permutation(TINY.seq_len)
        out = m(s_p, s_ctx, mask, ids, logsnr).data
        out_perm = m(s_p[:, perm], s_ctx[:, perm], mask[:, perm], ids, logsnr).data
        assert np.allclose(out_perm, out[:, perm], atol=1e-9)

    def test_class_conditioning_uses_null_row(self):
        m = tiny_model()
        randomize(m)
        s_p, s_ctx, mask, _, logsnr = tiny_inputs(batch=1)
        out_null = m(s_p, s_ctx, mask, [None], logsnr).data
        out_c0 = m(s_p, s_ctx, mask, [0], logsnr).data
        assert not np.allclose(out_null, out_c0)

    def test_unknown_class_rejected(self):
        m = tiny_model()
        s_p, s_ctx, mask, _, logsnr = tiny_inputs(batch=1)
        with pytest.raises(ValueError, match="unknown class"):
            m(s_p, s_ctx, mask, [7], logsnr)

    def test_length_mismatch_rejected(self):
        m = tiny_model()
        bad = np.zeros((1, 9, 8))
        with pytest.raises(ValueError):
            m(bad, bad, np.ones((1, 9)), [0], [0.0])

    def test_gradients_reach_all_parameter_groups(self):
        m = tiny_model()
        randomize(m)  # pretend one optimizer step has moved the gates
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs()
        eps = np.random.default_rng(7).standard_normal((3, 8, 8))
        pred = m(s_p, s_ctx, mask, ids, logsnr)
        loss = ag.square(pred + Tensor(-eps)).mean()
        loss.backward()
        for probe in ("head.w", "blocks.0.mod.w", "blocks.1.attn.wq",
                      "blocks.0.mlp.w1", "in_proj.w", "cond.w1", "class_emb"):
            g = m.params[probe].grad
            assert g is not None and np.abs(g).max() > 0, probe

    def test_spot_gradcheck(self):
        m = tiny_model()
        randomize(m)
        s_p, s_ctx, mask, ids, logsnr = tiny_inputs(batch=2)
        eps = np.random.default_rng(8).standard_normal((2, 8, 8))
        target = Tensor(eps)

        def f(*_):
            pred = m(s_p, s_ctx, mask, ids[:2], logsnr[:2])
            return ag.square(pred + target * -1.0).mean()

        probes = [m.params[k] for k in
                  ("head.w", "blocks.0.mod.w", "blocks.1.attn.wq", "cond.w2", "class_emb")]
        err = ag.gradcheck(f, probes)
        assert err < 1e-4, err


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tiny_model(dtype=np.float32)
        randomize(m)
        m.set_normalization(np.arange(8) * 0.1, np.arange(1, 9) * 0.5)
        sched = {"timesteps": 1000, "logsnr_min": -15.0, "logsnr_max": 15.0, "shape": "linear"}
        rng_state = np.random.default_rng(3).bit_generator.state
        ema = {k: v * 0.5 for k, v in m.state_dict().items()}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, step=17, schedule=sched, rng_state=rng_state,
                        extra={"ema": ema})
        ckpt = load_checkpoint(path)
        assert ckpt.step == 17
        assert ckpt.schedule == sched
        assert ckpt.config == TINY
        assert ckpt.rng_state == rng_state
        assert np.allclose(ckpt.norm["mu"], np.arange(8) * 0.1)
        for k, v in m.state_dict().items():
            assert np.array_equal(ckpt.subset("model")[k], v.astype(np.float32))
            assert np.array_equal(ckpt.subset("ema")[k], (v * 0.5).astype(np.float32))

    def test_model_from_checkpoint_prefers_ema(self, tmp_path):
        m = tiny_model(dtype=np.float32)
        randomize(m)
        ema = {k: np.zeros_like(v) for k, v in m.state_dict().items()}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, extra={"ema": ema})
        loaded = model_from_checkpoint(path, weights="ema")
        assert all(not v.data.any() for v in loaded.params.values())
        raw = model_from_checkpoint(path, weights="model")
        assert np.array_equal(raw.params["head.b"].data, m.params["head.b"].data)

    def test_ema_fallback_to_model(self, tmp_path):
        m = tiny_model(dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m)
        loaded = model_from_checkpoint(path, weights="ema")
        assert np.array_equal(loaded.params["in_proj.w"].data, m.params["in_proj.w"].data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_missing_subset(self, tmp_path):
        m = tiny_model(dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m)
        with pytest.raises(KeyError):
            load_checkpoint(path).subset("adam_m")
