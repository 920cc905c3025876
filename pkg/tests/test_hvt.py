import numpy as np
import pytest

import fedsem.autodiff as ad
from fedsem.autodiff import Tensor
from fedsem.hvt import (ClassifyHead, DtcnnDecoder, HvtConfig, HvtEncoder,
                        OverlappedPatchEmbed, SpatialReduce, SRLSAttention,
                        hvt_preset, predict_labels, softmax_scores,
                        srlsa_core)

RNG = np.random.default_rng(55)


def _rng():
    return np.random.default_rng(8)


def _brute_force_attention(q, k, v, tau):
    """Direct softmax(q k^T / tau) v, elementwise in python loops."""
    n, p, c = q.shape
    out = np.zeros_like(q)
    for b in range(n):
        scores = q[b] @ k[b].T / tau
        for i in range(p):
            row = scores[i] - scores[i].max()
            w = np.exp(row)
            w /= w.sum()
            out[b, i] = w @ v[b]
    return out


# -- attention core -----------------------------------------------------------

def test_srlsa_matches_brute_force_oracle():
    for trial in range(50):
        rng = np.random.default_rng(trial)
        n, p, c = int(rng.integers(1, 3)), int(rng.integers(2, 7)), int(rng.integers(2, 5))
        q, k, v = (rng.normal(size=(n, p, c)) for _ in range(3))
        tau = float(rng.uniform(0.3, 3.0))
        out = srlsa_core(Tensor(q), Tensor(k), Tensor(v), tau,
                         mask_self=False)
        assert np.allclose(out.data, _brute_force_attention(q, k, v, tau),
                           atol=1e-12)


def test_srlsa_mask_invariants():
    for trial in range(50):
        rng = np.random.default_rng(100 + trial)
        p = int(rng.integers(2, 8))
        q, k, v = (rng.normal(size=(1, p, 3)) for _ in range(3))
        q_t, k_t = Tensor(q), Tensor(k)
        scores = ad.matmul(q_t, ad.transpose(k_t, (0, 2, 1)))
        weights = ad.softmax_with_temperature(
            scores, 1.3, mask=np.eye(p, dtype=bool)).data
        assert np.all(np.diagonal(weights[0]) == 0.0)
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(weights >= 0.0)


def test_srlsa_reduction_shrinks_keys():
    rng = _rng()
    sr = SpatialReduce(4, 2, rng)
    q = Tensor(RNG.normal(size=(2, 16, 4)))
    k = Tensor(RNG.normal(size=(2, 16, 4)))
    v = Tensor(RNG.normal(size=(2, 16, 4)))
    out = srlsa_core(q, k, v, 1.0, mask_self=False, sr=sr, grid=(4, 4))
    assert out.shape == (2, 16, 4)  # queries keep full resolution
    reduced = sr(k, (4, 4))
    assert reduced.shape == (2, 4, 4)  # 16 tokens -> 4 at ratio 2


def test_srlsa_mask_with_reduction_rejected():
    sr = SpatialReduce(4, 2, _rng())
    q = Tensor(RNG.normal(size=(1, 16, 4)))
    with pytest.raises(ValueError):
        srlsa_core(q, q, q, 1.0, mask_self=True, sr=sr, grid=(4, 4))


def test_srlsa_special_tokens_bypass_reduction():
    rng = _rng()
    sr = SpatialReduce(4, 2, rng)
    p_spatial, n_special = 16, 2
    k = Tensor(RNG.normal(size=(1, p_spatial + n_special, 4)))
    q = Tensor(RNG.normal(size=(1, p_spatial + n_special, 4)))
    out = srlsa_core(q, k, k, 1.0, mask_self=False, sr=sr, grid=(4, 4),
                     n_special=n_special)
    assert out.shape == (1, 18, 4)


def test_attention_temperature_init():
    attn = SRLSAttention(16, 1, _rng())
    assert attn.tau == pytest.approx(np.sqrt(16))
    attn2 = SRLSAttention(16, 1, _rng(), tau_init=0.5)
    assert attn2.tau == pytest.approx(0.5)
    with pytest.raises(ValueError):
        SRLSAttention(16, 1, _rng(), tau_init=0.0)


def test_attention_projections_have_no_bias():
    attn = SRLSAttention(8, 1, _rng())
    names = [n for n, _ in attn.named_parameters()]
    assert "wq.bias" not in names
    assert "wq.weight" in names and "rho" in names


# -- config / presets ---------------------------------------------------------

def test_desk_classify_geometry():
    cfg = hvt_preset("desk", "classify", 1, 32)
    assert cfg.channels == (16, 32)
    assert cfg.stage_grids == (8, 4)
    assert cfg.c_h == 64
    assert cfg.sr_ratios == (2, 1)
    assert cfg.mlp_ratio == 2.0


def test_desk_reconstruct_geometry():
    cfg = hvt_preset("desk", "reconstruct", 3, 32)
    assert cfg.channels == (16, 32, 48, 64)
    assert cfg.stage_grids == (16, 8, 4, 2)
    assert cfg.c_h == 4 * 64
    assert cfg.sr_ratios == (4, 2, 1, 1)


def test_paper_preset_widths():
    cfg = hvt_preset("paper", "reconstruct", 3, 128)
    assert cfg.channels == (64, 128, 320, 512)
    assert cfg.depths == (2, 2, 2, 2)
    assert cfg.mlp_ratio == 4.0
    assert cfg.stage_grids == (64, 32, 16, 8)


def test_config_validation():
    with pytest.raises(ValueError, match="task"):
        HvtConfig("segment", 1, 32, (8,), (1,), (1,), 3, 1)
    with pytest.raises(ValueError, match="align"):
        HvtConfig("reconstruct", 1, 32, (8, 16), (1,), (1, 1), 3, 1)
    with pytest.raises(ValueError, match="2 stages"):
        HvtConfig("classify", 1, 32, (8,), (1,), (1,), 7, 3)
    with pytest.raises(ValueError, match="overlap"):
        HvtConfig("reconstruct", 1, 32, (8,), (1,), (1,), 3, 3)
    with pytest.raises(ValueError, match="divisible"):
        HvtConfig("reconstruct", 1, 32, (8,), (1,), (3,), 3, 1)
    with pytest.raises(ValueError):
        hvt_preset("giant", "classify", 1, 32)


# -- encoder ------------------------------------------------------------------

def test_patch_embed_token_count():
    emb = OverlappedPatchEmbed(1, 8, 7, 3, 32, _rng())
    out = emb(Tensor(RNG.normal(size=(2, 1, 32, 32))))
    assert out.shape == (2, 64, 8)  # 8x8 grid


def test_encoder_classify_output():
    cfg = hvt_preset("desk", "classify", 1, 32)
    enc = HvtEncoder(cfg, _rng())
    out = enc(Tensor(RNG.random((3, 1, 32, 32))))
    assert out.shape == (3, 64)


def test_encoder_reconstruct_output_channel_major():
    cfg = hvt_preset("desk", "reconstruct", 3, 32)
    enc = HvtEncoder(cfg, _rng())
    out = enc(Tensor(RNG.random((2, 3, 32, 32))))
    assert out.shape == (2, 256)


def test_encoder_rejects_wrong_input():
    cfg = hvt_preset("desk", "classify", 1, 32)
    enc = HvtEncoder(cfg, _rng())
    with pytest.raises(ValueError):
        enc(Tensor(RNG.random((1, 3, 32, 32))))
    with pytest.raises(ValueError):
        enc(Tensor(RNG.random((1, 1, 16, 16))))


def test_encoder_deterministic_per_seed():
    cfg = hvt_preset("desk", "classify", 1, 32)
    a = HvtEncoder(cfg, np.random.default_rng(3))
    b = HvtEncoder(cfg, np.random.default_rng(3))
    x = Tensor(RNG.random((1, 1, 32, 32)))
    assert np.array_equal(a(x).data, b(x).data)


def test_encoder_all_params_reachable():
    cfg = hvt_preset("desk", "classify", 1, 32)
    enc = HvtEncoder(cfg, _rng())
    out = enc(Tensor(RNG.random((2, 1, 32, 32)), requires_grad=False))
    out.sum().backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None, name


# -- decoders -----------------------------------------------------------------

def test_dtcnn_shapes():
    dec = DtcnnDecoder(64, 2, 3, _rng())
    out = dec(Tensor(RNG.normal(size=(2, 256))))
    assert out.shape == (2, 3, 32, 32)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_dtcnn_zero_network_is_half_gray():
    dec = DtcnnDecoder(8, 2, 1, _rng())
    for p in dec.parameters():
        p.data[...] = 0.0
    dec.bn1.gamma.data[:] = 1.0
    dec.bn2.gamma.data[:] = 1.0
    dec.bn3.gamma.data[:] = 1.0
    out = dec(Tensor(np.zeros((1, 32))))
    assert np.allclose(out.data, 0.5, atol=1e-12)


def test_dtcnn_rejects_wrong_length():
    dec = DtcnnDecoder(64, 2, 3, _rng())
    with pytest.raises(ValueError):
        dec(Tensor(RNG.normal(size=(2, 255))))


def test_classify_head():
    head = ClassifyHead(32, 4, _rng())
    cls, dis = head(Tensor(RNG.normal(size=(5, 64))))
    assert cls.shape == (5, 4) and dis.shape == (5, 4)
    with pytest.raises(ValueError):
        head(Tensor(RNG.normal(size=(5, 63))))


def test_softmax_scores_and_predictions():
    cls = np.array([[2.0, 1.0, 0.0, 0.0]])
    dis = np.array([[0.0, 1.0, 2.0, 0.0]])
    scores = softmax_scores(cls, dis)
    assert scores.shape == (1, 4)
    assert scores.sum() == pytest.approx(1.0, abs=1e-12)
    expected = 0.5 * (np.exp([2.0, 1.0, 0.0, 0.0]) / np.exp([2.0, 1.0, 0.0, 0.0]).sum()
                      + np.exp([0.0, 1.0, 2.0, 0.0]) / np.exp([0.0, 1.0, 2.0, 0.0]).sum())
    assert np.allclose(scores[0], expected, atol=1e-12)


def test_predict_labels_tie_breaks_low():
    cls = np.array([[1.0, 0.0, 1.0, 0.0]])
    dis = np.array([[1.0, 0.0, 1.0, 0.0]])
    assert predict_labels(cls, dis)[0] == 0
