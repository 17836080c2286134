import numpy as np
import pytest

from satformula.expr import BOS, EOS, OP_TOKENS, PAD, VOCAB_SIZE, OpKind, band_token, parse, to_tokens
from satformula.nn import layers as L
from satformula.nn.checkpoint import CheckpointError, load_params, params_from_bytes, params_to_bytes, save_params
from satformula.nn.model import (
    EncoderConfig,
    SatFormulaModel,
    SeqModelConfig,
    feature_fusion,
    image_encoder_forward,
    init_image_params,
)
from satformula.nn.optim import Adam, adam_step
from satformula.nn.tensor import Tensor, no_grad
from satformula.pipeline import _inference_memory, params_checksum

NDVI_TOKENS = to_tokens(parse("(B4 - B3) / (B4 + B3)"))


def fd_check(fn, x0, h=1e-4, tol=1e-4, seed=0):
    """Norm-wise relative check of d sum(fn(x) * W)/dx against central differences."""
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    W = np.random.default_rng(seed).normal(size=out.shape)
    (out * Tensor(W)).sum().backward()
    fd = np.zeros_like(x0)
    for j in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        with no_grad():
            fd[j] = (np.sum(fn(Tensor(xp)).data * W) - np.sum(fn(Tensor(xm)).data * W)) / (2 * h)
    assert np.linalg.norm(x.grad - fd) <= tol * max(np.linalg.norm(fd), 1e-8), (x.grad, fd)


@pytest.fixture(scope="module")
def model():
    return SatFormulaModel.create(EncoderConfig(), SeqModelConfig(), seed=0)


class TestConfigs:
    def test_defaults(self):
        e, s = EncoderConfig(), SeqModelConfig()
        assert (e.patch_size, e.embed_dim, e.stages, e.blocks_per_stage, e.window, e.heads, e.out_dim) == (
            4, 16, 2, 2, 4, 4, 128)
        assert (s.layers, s.heads, s.hidden, s.vocab) == (2, 4, 64, 18)

    def test_heads_divide_width(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=6, heads=4)
        with pytest.raises(ValueError):
            SeqModelConfig(hidden=10, heads=4)

    def test_divisibility(self):
        cfg = EncoderConfig()
        with pytest.raises(ValueError):
            cfg.stage_shapes(60, 64)
        with pytest.raises(ValueError):
            EncoderConfig(window=3).stage_shapes(64, 64)

    def test_shape_recurrence(self):
        for stages in (1, 2, 3):
            cfg = EncoderConfig(stages=stages, window=2)
            shapes = cfg.stage_shapes(64, 64)
            for (h0, w0, c0), (h1, w1, c1) in zip(shapes, shapes[1:]):
                assert (h1, w1, c1) == (h0 // 2, w0 // 2, 2 * c0)


class TestAttention:
    @pytest.fixture
    def params(self, rng):
        p = {}
        L.init_attention(p, "a", 8, rng)
        return p

    def test_single_position(self, params, rng):
        x = Tensor(rng.normal(size=(1, 1, 8)))
        out = L.multi_head_attention(params, "a", x, x, x, heads=2)
        expected = L.linear(params, "a.o", L.linear(params, "a.v", x))
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-12)

    def test_causal_gradient_probe(self, params, rng):
        x = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
        out = L.multi_head_attention(params, "a", x, x, x, heads=2, mask=L.causal_mask(3))
        out[:, 0].sum().backward()
        assert np.all(x.grad[0, 1:] == 0.0)
        assert np.any(x.grad[0, 0] != 0.0)

    def test_permutation_invariance(self, params, rng):
        q = Tensor(rng.normal(size=(2, 3, 8)))
        kv = rng.normal(size=(2, 5, 8))
        perm = rng.permutation(5)
        a = L.multi_head_attention(params, "a", q, Tensor(kv), Tensor(kv), heads=4)
        b = L.multi_head_attention(params, "a", q, Tensor(kv[:, perm]), Tensor(kv[:, perm]), heads=4)
        np.testing.assert_allclose(a.data.mean(axis=1), b.data.mean(axis=1), atol=1e-12)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_gradcheck(self, params, rng):
        kv = rng.normal(size=(1, 4, 8))
        fd_check(lambda q: L.multi_head_attention(params, "a", q, Tensor(kv), Tensor(kv), 2), rng.normal(size=(1, 2, 8)))

    def test_shape_errors(self, params):
        with pytest.raises(ValueError):
            L.multi_head_attention(params, "a", Tensor(np.ones((1, 2, 8))), Tensor(np.ones((1, 3, 8))),
                                   Tensor(np.ones((1, 4, 8))), 2)
        with pytest.raises(ValueError):
            L.multi_head_attention(params, "a", *(Tensor(np.ones((1, 2, 8))),) * 3, heads=3)


class TestImageEncoder:
    def test_default_pyramid(self, model, ndvi20):
        pyramid, F = model.encode_image(ndvi20[0].image)
        assert [p.shape for p in pyramid] == [(1, 16, 16, 16), (1, 8, 8, 32)]
        assert F.shape == (1, 128)

    def test_single_stage(self, rng):
        cfg = EncoderConfig(stages=1)
        params = init_image_params(cfg, rng)
        pyramid, F = image_encoder_forward(rng.uniform(size=(2, 64, 64, 4)), cfg, params)
        assert len(pyramid) == 1 and pyramid[0].shape == (2, 16, 16, 16)
        assert not any(".merge" in k for k in params)
        assert F.shape == (2, 128)

    def test_band_mismatch(self, model, rng):
        with pytest.raises(ValueError):
            model.encode_image(rng.uniform(size=(1, 64, 64, 3)))

    def test_pixel_gradient_fd(self, rng):
        cfg = EncoderConfig(patch_size=2, embed_dim=8, stages=2, blocks_per_stage=1, window=2, heads=2,
                            out_dim=8, in_chans=2)
        params = init_image_params(cfg, rng)
        head = rng.normal(size=(8, 1))
        x0 = rng.uniform(size=(1, 8, 8, 2))
        fd_check(lambda x: image_encoder_forward(x, cfg, params)[1] @ Tensor(head), x0, tol=1e-3)

    def test_per_band_encoders(self, rng):
        cfg = EncoderConfig(in_chans=2, per_band_encoders=True, out_dim=16)
        params = init_image_params(cfg, rng)
        pyramid, F = image_encoder_forward(rng.uniform(size=(3, 32, 32, 2)), cfg, params)
        assert F.shape == (3, 16)
        assert [p.shape for p in pyramid] == [(3, 8, 8, 32), (3, 4, 4, 64)]

    def test_deterministic(self, ndvi20):
        a = SatFormulaModel.create(EncoderConfig(), SeqModelConfig(), seed=3)
        b = SatFormulaModel.create(EncoderConfig(), SeqModelConfig(), seed=3)
        c = SatFormulaModel.create(EncoderConfig(), SeqModelConfig(), seed=4)
        assert params_checksum(a.params) == params_checksum(b.params) != params_checksum(c.params)
        np.testing.assert_array_equal(a.encode_image(ndvi20[0].image)[1].data, b.encode_image(ndvi20[0].image)[1].data)


class TestExpressionEncoder:
    def test_pad_invariance(self, model):
        seq = np.array(NDVI_TOKENS)
        short = model.encode_expr(seq[None]).data
        padded = model.encode_expr(np.concatenate([seq, [PAD] * 5])[None]).data
        np.testing.assert_allclose(short, padded, rtol=0, atol=1e-12)

    def test_batch_independence(self, model):
        others = [to_tokens(parse(t)) for t in ["B1", "B1 + B2", "exp(B3) * 2.0", "log(B4)", "B2 / B1", "B1 - B3",
                                                "(B1 + B2) * (B3 - B4)"]]
        alone = model.encode_expr([NDVI_TOKENS]).data[0]
        batch = model.encode_expr(others[:3] + [NDVI_TOKENS] + others[3:]).data
        assert batch.shape == (8, 64)
        np.testing.assert_allclose(batch[3], alone, rtol=0, atol=1e-12)

    def test_token_swap_changes_output(self, model):
        swapped = list(NDVI_TOKENS)
        swapped[3], swapped[4] = swapped[4], swapped[3]  # B4 <-> B3 inside the subtraction
        a, b = model.encode_expr([NDVI_TOKENS]).data, model.encode_expr([swapped]).data
        assert np.max(np.abs(a - b)) > 1e-6

    def test_out_of_vocab(self, model):
        with pytest.raises(ValueError):
            model.encode_expr([[BOS, VOCAB_SIZE, EOS]])
        with pytest.raises(ValueError):
            model.encode_expr([[BOS] + [band_token(1)] * 70 + [EOS]])


class TestDecoder:
    def test_rows_normalized(self, model, rng):
        probs = model.decoder_forward([NDVI_TOKENS[:-1]], Tensor(rng.normal(size=(1, 64))),
                                      Tensor(rng.normal(size=(1, 128)))).data
        assert probs.shape == (1, len(NDVI_TOKENS) - 1, VOCAB_SIZE)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_zero_image_features(self, model):
        probs = model.decoder_forward([[BOS]], Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 128)))).data
        assert np.all(np.isfinite(probs)) and np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_causality(self, model, rng):
        F_exp, F_img = Tensor(rng.normal(size=(1, 64))), Tensor(rng.normal(size=(1, 128)))
        prefix = list(NDVI_TOKENS[:6])
        base = model.decoder_forward([prefix], F_exp, F_img).data[0]
        for t in range(len(prefix) - 1):
            perturbed = list(prefix)
            perturbed[t + 1] = band_token(8) if perturbed[t + 1] != band_token(8) else band_token(7)
            out = model.decoder_forward([perturbed], F_exp, F_img).data[0]
            np.testing.assert_array_equal(out[:t + 1], base[:t + 1])
            assert np.max(np.abs(out[t + 1] - base[t + 1])) > 0

    def test_padding_does_not_leak(self, model, rng):
        F_exp, F_img = Tensor(rng.normal(size=(2, 64))), Tensor(rng.normal(size=(2, 128)))
        a = model.decoder_forward([NDVI_TOKENS[:3], NDVI_TOKENS[:3] + (PAD, PAD)], F_exp, F_img).data
        np.testing.assert_allclose(a[1, :3], model.decoder_forward([NDVI_TOKENS[:3]], Tensor(F_exp.data[1:]),
                                                                   Tensor(F_img.data[1:])).data[0], atol=1e-12)

    def test_batch_mismatch(self, model):
        with pytest.raises(ValueError):
            model.decoder_forward([[BOS], [BOS]], Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 128))))


class TestFusion:
    def test_zero_inputs_bias_pathway(self, model):
        p = {k: v.data for k, v in model.params.items()}
        cfg = model.seq_cfg
        out = model.fuse(Tensor(np.zeros((1, 128))), Tensor(np.zeros((1, 64)))).data[0]
        # independent numpy evaluation of the block at zero input
        img_tok, exp_tok = p["fuse.img.b"], np.zeros(64)
        pair = np.stack([img_tok, exp_tok])
        q = exp_tok @ p["fuse.attn.q.w"] + p["fuse.attn.q.b"]
        k = pair @ p["fuse.attn.k.w"] + p["fuse.attn.k.b"]
        v = pair @ p["fuse.attn.v.w"] + p["fuse.attn.v.b"]
        dh = 64 // cfg.fusion_heads
        heads = []
        for h in range(cfg.fusion_heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits = k[:, sl] @ q[sl] / np.sqrt(dh)
            a = np.exp(logits - logits.max())
            heads.append((a / a.sum()) @ v[:, sl])
        x = exp_tok + np.concatenate(heads) @ p["fuse.attn.o.w"] + p["fuse.attn.o.b"]
        x = x + np.maximum(x @ p["fuse.ffn.fc1.w"] + p["fuse.ffn.fc1.b"], 0) @ p["fuse.ffn.fc2.w"] + p["fuse.ffn.fc2.b"]
        np.testing.assert_allclose(out, x, rtol=1e-12, atol=1e-14)

    def test_sensitive_to_image(self, model, rng):
        F_exp = Tensor(rng.normal(size=(1, 64)))
        a = model.fuse(Tensor(rng.normal(size=(1, 128))), F_exp).data
        b = model.fuse(Tensor(rng.normal(size=(1, 128))), F_exp).data
        assert np.max(np.abs(a - b)) > 1e-6
        assert a.shape == (1, 64)

    def test_gradcheck(self, model, rng):
        F_exp = rng.normal(size=(2, 64))
        F_img = rng.normal(size=(2, 128))
        fd_check(lambda x: model.fuse(x, Tensor(F_exp)), F_img)
        fd_check(lambda x: model.fuse(Tensor(F_img), x), F_exp)

    def test_shape_errors(self, model):
        with pytest.raises(ValueError):
            feature_fusion(np.zeros((1, 128)), np.zeros((1, 32)), model.params, model.seq_cfg)
        with pytest.raises(ValueError):
            feature_fusion(np.zeros((2, 128)), np.zeros((1, 64)), model.params, model.seq_cfg)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = {"w": rng.normal(size=5)}
        new, state = adam_step(p, {"w": np.zeros(5)}, {}, lr=0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state["t"] == 1

    def test_first_step_sign(self, rng):
        g = rng.normal(size=20)
        g = np.where(np.abs(g) < 0.05, 0.5, g)
        p = {"w": np.zeros(20)}
        new, _ = adam_step(p, {"w": g}, {}, lr=1e-3)
        np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-5)

    def test_quadratic_convergence(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            d = w - 3.0
            (d * d).sum().backward()
            opt.step()
        assert abs(w.data[0] - 3.0) < 0.05

    def test_inputs_not_modified(self):
        p, g = {"w": np.ones(3)}, {"w": np.ones(3)}
        adam_step(p, g, {}, lr=0.1)
        np.testing.assert_array_equal(p["w"], 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, {}, lr=0.1)


class TestCheckpoint:
    def test_bitwise_roundtrip(self, model, tmp_path):
        path = tmp_path / "m.satw"
        save_params(model.params, path)
        back = load_params(path)
        assert list(back) == list(model.params)
        for k, v in model.params.items():
            assert back[k].tobytes() == v.data.tobytes()
        assert params_to_bytes(back) == params_to_bytes(model.params)

    def test_scalar_tensor(self):
        back = params_from_bytes(params_to_bytes({"s": np.array(2.5)}))
        assert back["s"].shape == () and back["s"] == 2.5

    def test_errors(self, model):
        blob = params_to_bytes({"a": np.ones(3)})
        with pytest.raises(CheckpointError):
            params_from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointError):
            params_from_bytes(blob[:-1])
        with pytest.raises(CheckpointError):
            params_from_bytes(blob + b"\0")
        with pytest.raises(CheckpointError):
            params_to_bytes({"bad name": np.ones(1)})


class TestOverfitOneSkeleton:
    def test_greedy_steps_confident(self, ndvi_overfit):
        model, data = ndvi_overfit["model"], ndvi_overfit["data"]
        with no_grad():
            F_img = model.encode_image([s.image for s in data])[1].data
        memory = _inference_memory(model, F_img, [s.skeleton for s in data])
        expected = [OP_TOKENS[OpKind.DIV], OP_TOKENS[OpKind.SUB], band_token(4), band_token(3),
                    OP_TOKENS[OpKind.ADD], band_token(4), band_token(3)]
        assert list(NDVI_TOKENS[1:-1]) == expected
        prefix = [BOS]
        for tok in expected + [EOS]:
            logp = model.next_token_log_probs([prefix], memory)[0]
            assert int(np.argmax(logp)) == tok
            assert np.exp(logp[tok]) >= 0.9
            prefix.append(int(np.argmax(logp)))
