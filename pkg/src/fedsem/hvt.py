"""Hierarchical vision transformer encoder and task decoders.

The encoder is a pyramid of up to four stages, each built from an
overlapped patch embedding followed by transformer blocks whose
attention reduces key/value tokens spatially and masks each token's
attention to itself wherever token identity survives the reduction.
Classification consumes two extra tokens (class + distill) appended at
the final stage; reconstruction consumes the flattened final token map
through a transpose-convolution decoder.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear,
                 Module, ModuleList, Parameter)

TASKS = ("classify", "reconstruct")

LATER_PATCH = 3
LATER_OVERLAP = 1


def _embed_extent(extent, patch, stride, pad):
    return (extent + 2 * pad - patch) // stride + 1


@dataclass(frozen=True)
class HvtConfig:
    task: str
    in_channels: int
    image_size: int
    channels: tuple
    depths: tuple
    sr_ratios: tuple
    stage1_patch: int
    stage1_overlap: int
    mlp_ratio: float = 2.0
    num_classes: int = 4
    tau_init: Optional[float] = None   # None -> sqrt(stage width)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not (len(self.channels) == len(self.depths) == len(self.sr_ratios)):
            raise ValueError("channels, depths, sr_ratios must align")
        if not 1 <= len(self.channels) <= 4:
            raise ValueError("between 1 and 4 stages supported")
        if self.task == "classify" and len(self.channels) != 2:
            raise ValueError("classification uses exactly the first 2 stages")
        if any(r < 1 for r in self.sr_ratios):
            raise ValueError("spatial-reduction ratios must be >= 1")
        if self.stage1_patch <= self.stage1_overlap:
            raise ValueError("patch must exceed overlap (stride would be <= 0)")
        for grid, ratio in zip(self.stage_grids, self.sr_ratios):
            if grid % ratio != 0:
                raise ValueError(f"grid {grid} not divisible by ratio {ratio}")

    @property
    def stage_count(self):
        return len(self.channels)

    @property
    def stage_grids(self):
        stride1 = self.stage1_patch - self.stage1_overlap
        grids = [_embed_extent(self.image_size, self.stage1_patch, stride1,
                               self.stage1_overlap)]
        for _ in range(1, self.stage_count):
            grids.append(_embed_extent(grids[-1], LATER_PATCH,
                                       LATER_PATCH - LATER_OVERLAP,
                                       LATER_OVERLAP))
        return tuple(grids)

    @property
    def c_h(self):
        """Semantic vector length produced by the encoder."""
        if self.task == "classify":
            return 2 * self.channels[-1]
        return self.stage_grids[-1] ** 2 * self.channels[-1]


def hvt_preset(name, task, in_channels, image_size, num_classes=4):
    """Named model size: 'desk' (CPU scale) or 'paper' (full width)."""
    if name == "desk":
        channels, depths, mlp = (16, 32, 48, 64), (1, 1, 1, 1), 2.0
    elif name == "paper":
        channels, depths, mlp = (64, 128, 320, 512), (2, 2, 2, 2), 4.0
    else:
        raise ValueError(f"unknown preset {name!r}")
    if task == "classify":
        # stride-4 stem: image-level semantics need only a shallow pyramid
        return HvtConfig(task, in_channels, image_size, channels[:2],
                         depths[:2], (2, 1), stage1_patch=7, stage1_overlap=3,
                         mlp_ratio=mlp, num_classes=num_classes)
    # stride-2 stem so four halvings land on a 2x2 seed map at 32x32
    return HvtConfig(task, in_channels, image_size, channels, depths,
                     (4, 2, 1, 1), stage1_patch=3, stage1_overlap=1,
                     mlp_ratio=mlp, num_classes=num_classes)


# -- building blocks ----------------------------------------------------------

class OverlappedPatchEmbed(Module):
    """Strided conv tokenizer with zero padding equal to the overlap."""

    def __init__(self, c_in, c_out, patch, overlap, in_extent, rng):
        super().__init__()
        stride = patch - overlap
        if stride <= 0:
            raise ValueError(f"patch {patch} with overlap {overlap} "
                             f"gives non-positive stride")
        self.proj = Conv2d(c_in, c_out, patch, rng, stride=stride,
                           padding=overlap)
        extent = _embed_extent(in_extent, patch, stride, overlap)
        self.grid = (extent, extent)
        self.norm = LayerNorm(c_out)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(1, extent * extent, c_out)))

    def forward(self, x):
        n = x.shape[0]
        fmap = self.proj(x)
        c = fmap.shape[1]
        tokens = ad.transpose(ad.reshape(fmap, (n, c, -1)), (0, 2, 1))
        return self.norm(tokens) + self.pos


class SpatialReduce(Module):
    """Fold R x R token blocks into one token through a learned projection."""

    def __init__(self, channels, ratio, rng):
        super().__init__()
        self.ratio = ratio
        bound = 1.0 / np.sqrt(ratio * ratio * channels)
        self.w_s = Parameter(rng.uniform(-bound, bound,
                                         size=(ratio * ratio * channels, channels)))
        self.norm = LayerNorm(channels)

    def forward(self, tokens, grid, apply_norm=True):
        n, p, c = tokens.shape
        h, w = grid
        r = self.ratio
        if p != h * w:
            raise ValueError(f"token count {p} does not match grid {grid}")
        if h % r != 0 or w % r != 0:
            raise ValueError(f"grid {grid} not divisible by ratio {r}")
        t = ad.reshape(tokens, (n, h // r, r, w // r, r, c))
        t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
        t = ad.reshape(t, (n, (h * w) // (r * r), r * r * c))
        reduced = ad.matmul(t, self.w_s)
        return self.norm(reduced) if apply_norm else reduced


def srlsa_core(q, k, v, tau, mask_self, sr=None, grid=None, n_special=0):
    """Attention weights times values, with optional reduction and mask.

    q, k, v are already-projected (N, P, C) tensors whose last n_special
    tokens are non-spatial and bypass the reduction.  The diagonal mask
    is only meaningful without reduction (query identity must survive in
    the key axis); callers enforce that combination.
    """
    n, p, c = q.shape
    if sr is not None:
        if mask_self:
            raise ValueError("self-mask undefined after spatial reduction")
        p_spatial = p - n_special
        k_sp = sr(k[:, :p_spatial], grid)
        v_sp = sr(v[:, :p_spatial], grid)
        if n_special:
            k = ad.concat([k_sp, k[:, p_spatial:]], axis=1)
            v = ad.concat([v_sp, v[:, p_spatial:]], axis=1)
        else:
            k, v = k_sp, v_sp
        mask = None
    elif mask_self:
        if p < 2:
            raise ValueError("self-mask needs at least 2 tokens")
        mask = np.eye(p, dtype=bool)
    else:
        mask = None
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
    weights = ad.softmax_with_temperature(scores, tau, mask=mask, axis=-1)
    return ad.matmul(weights, v)


class SRLSAttention(Module):
    """Single-head attention with learnable temperature tau = exp(rho)."""

    def __init__(self, channels, ratio, rng, grid=None, n_special=0,
                 tau_init=None):
        super().__init__()
        self.wq = Linear(channels, channels, rng, bias=False)
        self.wk = Linear(channels, channels, rng, bias=False)
        self.wv = Linear(channels, channels, rng, bias=False)
        tau0 = np.sqrt(channels) if tau_init is None else tau_init
        if tau0 <= 0:
            raise ValueError("temperature init must be positive")
        self.rho = Parameter(np.log(tau0))
        self.sr = SpatialReduce(channels, ratio, rng) if ratio > 1 else None
        self.mask_self = ratio == 1
        self.grid = grid
        self.n_special = n_special

    @property
    def tau(self):
        return float(np.exp(self.rho.data))

    def forward(self, tokens):
        q = self.wq(tokens)
        k = self.wk(tokens)
        v = self.wv(tokens)
        return srlsa_core(q, k, v, ad.exp(self.rho), self.mask_self,
                          sr=self.sr, grid=self.grid,
                          n_special=self.n_special)


class TransformerBlock(Module):
    def __init__(self, channels, ratio, rng, mlp_ratio, grid, n_special=0,
                 tau_init=None):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.attn = SRLSAttention(channels, ratio, rng, grid=grid,
                                  n_special=n_special, tau_init=tau_init)
        self.norm2 = LayerNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, tokens):
        tokens = tokens + self.attn(self.norm1(tokens))
        return tokens + self.fc2(ad.gelu(self.fc1(self.norm2(tokens))))


# -- encoder ------------------------------------------------------------------

class HvtEncoder(Module):
    """Pyramid semantic extractor; output length is cfg.c_h."""

    def __init__(self, cfg: HvtConfig, rng):
        super().__init__()
        self.cfg = cfg
        grids = cfg.stage_grids
        self.embeds = ModuleList()
        self.stages = ModuleList()
        extent = cfg.image_size
        c_in = cfg.in_channels
        for s in range(cfg.stage_count):
            patch, overlap = ((cfg.stage1_patch, cfg.stage1_overlap) if s == 0
                              else (LATER_PATCH, LATER_OVERLAP))
            embed = OverlappedPatchEmbed(c_in, cfg.channels[s], patch,
                                         overlap, extent, rng)
            n_special = 2 if (cfg.task == "classify"
                              and s == cfg.stage_count - 1) else 0
            grid = (grids[s], grids[s])
            blocks = ModuleList(
                TransformerBlock(cfg.channels[s], cfg.sr_ratios[s], rng,
                                 cfg.mlp_ratio, grid, n_special=n_special,
                                 tau_init=cfg.tau_init)
                for _ in range(cfg.depths[s]))
            self.embeds.append(embed)
            self.stages.append(blocks)
            extent = grids[s]
            c_in = cfg.channels[s]
        if cfg.task == "classify":
            c_last = cfg.channels[-1]
            self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, c_last)))
            self.distill_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, c_last)))

    def forward(self, x):
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input shape (N, {expected[0]}, "
                             f"{expected[1]}, {expected[2]}), got {x.shape}")
        n = x.shape[0]
        grids = cfg.stage_grids
        tokens = None
        for s in range(cfg.stage_count):
            tokens = self.embeds[s](x)
            if cfg.task == "classify" and s == cfg.stage_count - 1:
                cls = ad.broadcast_to(self.cls_token, (n,) + self.cls_token.shape[1:])
                distill = ad.broadcast_to(self.distill_token,
                                          (n,) + self.distill_token.shape[1:])
                tokens = ad.concat([tokens, cls, distill], axis=1)
            for block in self.stages[s]:
                tokens = block(tokens)
            if s < cfg.stage_count - 1:
                g = grids[s]
                x = ad.reshape(ad.transpose(tokens, (0, 2, 1)),
                               (n, cfg.channels[s], g, g))
        if cfg.task == "classify":
            p_spatial = grids[-1] ** 2
            specials = tokens[:, p_spatial:]
            return ad.reshape(specials, (n, 2 * cfg.channels[-1]))
        # channel-major flatten so the decoder reshapes straight to NCHW
        flat = ad.transpose(tokens, (0, 2, 1))
        return ad.reshape(flat, (n, cfg.c_h))


# -- task decoders ------------------------------------------------------------

class DtcnnDecoder(Module):
    """Transpose-conv image decoder: seed map -> 8x upsample -> shuffle."""

    def __init__(self, c_in, seed_grid, out_channels, rng, widths=(48, 24)):
        super().__init__()
        self.c_in = c_in
        self.seed_grid = seed_grid
        self.out_channels = out_channels
        pre_shuffle = out_channels * 4
        w1, w2 = widths
        self.deconv1 = ConvTranspose2d(c_in, w1, 4, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(w1)
        self.deconv2 = ConvTranspose2d(w1, w2, 4, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(w2)
        self.deconv3 = ConvTranspose2d(w2, pre_shuffle, 4, rng, stride=2, padding=1)
        self.bn3 = BatchNorm2d(pre_shuffle)

    def forward(self, semantics):
        n = semantics.shape[0]
        expected = self.c_in * self.seed_grid ** 2
        if semantics.shape[-1] != expected:
            raise ValueError(f"expected semantics of length {expected}, "
                             f"got {semantics.shape[-1]}")
        x = ad.reshape(semantics, (n, self.c_in, self.seed_grid, self.seed_grid))
        x = self.bn1(ad.gelu(self.deconv1(x)))
        x = self.bn2(ad.gelu(self.deconv2(x)))
        x = self.bn3(ad.gelu(self.deconv3(x)))
        return ad.sigmoid(ad.pixel_shuffle(x, 2))


class ClassifyHead(Module):
    """Two linear heads over the class/distill halves of the semantics."""

    def __init__(self, stage_channels, num_classes, rng):
        super().__init__()
        self.stage_channels = stage_channels
        self.num_classes = num_classes
        self.cls_fc = Linear(stage_channels, num_classes, rng)
        self.distill_fc = Linear(stage_channels, num_classes, rng)

    def forward(self, semantics):
        c = self.stage_channels
        if semantics.shape[-1] != 2 * c:
            raise ValueError(f"expected semantics of length {2 * c}, "
                             f"got {semantics.shape[-1]}")
        return self.cls_fc(semantics[:, :c]), self.distill_fc(semantics[:, c:])


def _softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_scores(cls_logits, distill_logits):
    """Per-sample class probabilities: mean of the two head softmaxes."""
    cls_logits = cls_logits.data if isinstance(cls_logits, Tensor) else cls_logits
    distill_logits = (distill_logits.data if isinstance(distill_logits, Tensor)
                      else distill_logits)
    return 0.5 * (_softmax_np(cls_logits) + _softmax_np(distill_logits))


def predict_labels(cls_logits, distill_logits):
    """Argmax of the averaged softmax; ties break to the lowest index."""
    return np.argmax(softmax_scores(cls_logits, distill_logits), axis=-1)
