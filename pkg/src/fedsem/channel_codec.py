"""Autoencoder channel codec and bandwidth-ratio bookkeeping.

The encoder maps a semantic vector of length C_H onto a codeword of
length C_L sized by the bandwidth ratio R; the decoder mirrors it and
ends in a sigmoid, so recovered semantics live in [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Linear, Module


def bandwidth_to_length(ratio, height, width, channels, n_t=2):
    """Smallest codeword length >= R*H*W*C that packs into 2*n_t lanes."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"bandwidth ratio must be in (0, 1], got {ratio}")
    raw = ratio * height * width * channels
    lane = 2 * n_t
    return int(np.ceil(np.ceil(raw) / lane)) * lane


@dataclass(frozen=True)
class BandwidthSpec:
    ratio: float
    height: int
    width: int
    channels: int
    n_t: int = 2

    @property
    def c_l(self):
        return bandwidth_to_length(self.ratio, self.height, self.width,
                                   self.channels, self.n_t)


def _tiled_identity(d_in, d_out):
    """Identity pattern, column-tiled or truncated to fit the shape."""
    eye = np.zeros((d_in, d_out))
    for j in range(d_out):
        eye[j % d_in, j] = 1.0
    return eye


def _near_identity(linear, d_in, d_out, rng, scale=1.0):
    # start the codec as a pass-through: a random dense mix at init
    # scrambles the latent's spatial layout, which the deconv decoder
    # cannot undo, and training stalls at predicting the dataset mean
    noise = 0.5 / np.sqrt(d_in)
    linear.weight.data = (scale * _tiled_identity(d_in, d_out)
                          + rng.uniform(-noise, noise, size=(d_in, d_out)))
    linear.bias.data = rng.uniform(-noise, noise, size=d_out)


class ChannelEncoder(Module):
    """MLP C_H -> C_H -> C_L with an inner ReLU."""

    def __init__(self, c_h, c_l, rng):
        super().__init__()
        self.c_h = c_h
        self.c_l = c_l
        self.hidden = Linear(c_h, c_h, rng)
        self.out = Linear(c_h, c_l, rng)
        _near_identity(self.hidden, c_h, c_h, rng)
        # the -0.5 bias removes the DC of sigmoid-squashed semantics, so
        # transmit power is not wasted on a constant after normalization
        _near_identity(self.out, c_h, c_l, rng)
        self.out.bias.data = self.out.bias.data - 0.5

    def forward(self, x):
        if x.shape[-1] != self.c_h:
            raise ValueError(f"expected semantics of length {self.c_h}, "
                             f"got {x.shape[-1]}")
        return self.out(ad.relu(self.hidden(x)))


class ChannelDecoder(Module):
    """Mirror MLP C_L -> C_H -> C_H ending in a sigmoid."""

    def __init__(self, c_h, c_l, rng):
        super().__init__()
        self.c_h = c_h
        self.c_l = c_l
        self.hidden = Linear(c_l, c_h, rng)
        self.out = Linear(c_h, c_h, rng)
        _near_identity(self.hidden, c_l, c_h, rng)
        # +0.5 undoes the encoder's DC shift before the ReLU clips
        self.hidden.bias.data = self.hidden.bias.data + 0.5
        # sigmoid(4x - 2) ~ x on (0, 1): decode starts near pass-through
        # despite the bounded output
        _near_identity(self.out, c_h, c_h, rng, scale=4.0)
        self.out.bias.data = self.out.bias.data - 2.0

    def forward(self, y):
        if y.shape[-1] != self.c_l:
            raise ValueError(f"expected codeword of length {self.c_l}, "
                             f"got {y.shape[-1]}")
        return ad.sigmoid(self.out(ad.relu(self.hidden(y))))
