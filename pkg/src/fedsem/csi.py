"""Learned refinement of least-squares channel estimates.

A coarse complex N_R x N_T estimate enters as a two-plane real map, is
nearest-neighbor upsampled to a 16x16 feature map, passed through a
small U-shaped encoder/decoder with skip concatenations, and pooled
back down to the original extent.  Refiners are trained per SNR and
saved under ``csi_refiner_snr<dB>.flsc``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mimo
from .autodiff import Tensor
from .nn import AdamW, BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .seeding import Purpose, substream

UPSAMPLE_EXTENT = 16
LEAKY_SLOPE = 0.01

PRETRAIN_STEPS = 2000
PRETRAIN_BATCH = 64
SAMPLE_COUNT = 50_000
HELD_OUT_FRACTION = 0.1


def checkpoint_name(snr_db):
    return f"csi_refiner_snr{snr_db:g}.flsc"


def complex_to_planes(h):
    """(..., N_R, N_T) complex -> (..., 2, N_R, N_T) real/imag planes."""
    h = np.asarray(h, dtype=np.complex128)
    return np.stack([h.real, h.imag], axis=-3)


def planes_to_complex(planes):
    planes = np.asarray(planes, dtype=np.float64)
    return planes[..., 0, :, :] + 1j * planes[..., 1, :, :]


def _upsample_nearest(x, factor):
    n, c, h, w = x.shape
    t = ad.reshape(x, (n, c, h, 1, w, 1))
    t = ad.broadcast_to(t, (n, c, h, factor, w, factor))
    return ad.reshape(t, (n, c, h * factor, w * factor))


def _downsample_mean(x, factor):
    n, c, h, w = x.shape
    t = ad.reshape(x, (n, c, h // factor, factor, w // factor, factor))
    return ad.tsum(t, axis=(3, 5)) * (1.0 / (factor * factor))


class CsiRefiner(Module):
    """Two-level U-shaped denoiser over upsampled channel planes.

    ``use_skips=False`` replaces the concatenated encoder features with
    zeros of the same shape, so wiring changes never alter shapes.
    """

    def __init__(self, rng, n_r=2, n_t=2, widths=(8, 16), use_skips=True):
        super().__init__()
        if UPSAMPLE_EXTENT % (4 * n_r) != 0 or UPSAMPLE_EXTENT % (4 * n_t) != 0:
            raise ValueError("upsample extent incompatible with matrix shape")
        self.n_r = n_r
        self.n_t = n_t
        self.use_skips = use_skips
        w1, w2 = widths
        self.enc1 = Conv2d(2, w1, 3, rng, stride=2, padding=1)
        self.bn_e1 = BatchNorm2d(w1)
        self.enc2 = Conv2d(w1, w2, 3, rng, stride=2, padding=1)
        self.bn_e2 = BatchNorm2d(w2)
        self.dec1 = ConvTranspose2d(w2, w1, 4, rng, stride=2, padding=1)
        self.bn_d1 = BatchNorm2d(w1)
        self.dec2 = ConvTranspose2d(2 * w1, w1, 4, rng, stride=2, padding=1)
        self.bn_d2 = BatchNorm2d(w1)
        self.head = Conv2d(w1 + 2, 2, 1, rng)

    def _skip(self, fresh, skip):
        if not self.use_skips:
            skip = Tensor(np.zeros(skip.shape))
        return ad.concat([fresh, skip], axis=1)

    def forward(self, planes):
        if tuple(planes.shape[1:]) != (2, self.n_r, self.n_t):
            raise ValueError(f"expected (N, 2, {self.n_r}, {self.n_t}) planes, "
                             f"got {planes.shape}")
        factor = UPSAMPLE_EXTENT // self.n_r
        x0 = _upsample_nearest(planes, factor)
        e1 = self.bn_e1(ad.leaky_relu(self.enc1(x0), LEAKY_SLOPE))
        e2 = self.bn_e2(ad.leaky_relu(self.enc2(e1), LEAKY_SLOPE))
        d1 = self.bn_d1(ad.leaky_relu(self.dec1(e2), LEAKY_SLOPE))
        d2 = self.bn_d2(ad.leaky_relu(self.dec2(self._skip(d1, e1)), LEAKY_SLOPE))
        out = self.head(self._skip(d2, x0))
        return _downsample_mean(out, factor)

    def refine(self, h_ls):
        """Single complex matrix in, refined complex matrix out."""
        h_ls = np.asarray(h_ls, dtype=np.complex128)
        if h_ls.shape != (self.n_r, self.n_t):
            raise ValueError(f"expected {(self.n_r, self.n_t)} estimate, "
                             f"got {h_ls.shape}")
        planes = complex_to_planes(h_ls)[None]
        out = self.forward(Tensor(planes))
        return planes_to_complex(out.data[0])


def refiner_loss(h_u_planes, target_planes):
    """Mean over the batch of ||h_U - target||^2 / (matrix element count)."""
    n = h_u_planes.shape[0]
    elements = target_planes.shape[-1] * target_planes.shape[-2]
    diff = h_u_planes - Tensor(target_planes)
    return (diff * diff).sum() * (1.0 / (n * elements))


def nmse(estimates, truths):
    """Mean of ||e - h||_F^2 / ||h||_F^2 over paired draws."""
    estimates = np.asarray(estimates)
    truths = np.asarray(truths)
    num = np.sum(np.abs(estimates - truths) ** 2, axis=(-2, -1))
    den = np.sum(np.abs(truths) ** 2, axis=(-2, -1))
    return float(np.mean(num / den))


@dataclass
class CsiSampleSet:
    train: np.ndarray      # (M_train, N_R, N_T) complex
    held_out: np.ndarray   # (M_held, N_R, N_T) complex

    @classmethod
    def draw(cls, master_seed, count=SAMPLE_COUNT,
             held_fraction=HELD_OUT_FRACTION, n_r=2, n_t=2):
        rng = substream(master_seed, Purpose.CSI_SAMPLES)
        draws = np.stack([mimo.draw_channel(rng, n_r, n_t)
                          for _ in range(count)])
        n_held = int(round(count * held_fraction))
        return cls(train=draws[n_held:], held_out=draws[:n_held])


def simulate_ls_batch(channels, sigma, rng, rho=1.0):
    """LS estimates for a batch of true draws through one pilot burst."""
    gamma = mimo.make_pilot(channels.shape[-1], rho)
    noise = mimo.complex_noise(rng, channels.shape, sigma)
    return (channels @ gamma + noise) @ np.linalg.inv(gamma.astype(np.complex128))


def pretrain_refiner(refiner, samples, snr_db, master_seed,
                     steps=PRETRAIN_STEPS, batch_size=PRETRAIN_BATCH,
                     lr=1e-3, target_ls=False):
    """Train the refiner on simulated pilot passes at one SNR.

    The optimization target is the true channel draw; ``target_ls``
    switches to the literal LS estimate (which cannot denoise) for
    comparison runs.  Returns the per-step loss history.
    """
    if samples.train.shape[0] == 0:
        raise ValueError("empty channel sample set")
    sigma = mimo.snr_to_noise_std(snr_db)
    optimizer = AdamW(refiner.parameters(), lr=lr, weight_decay=0.0)
    history = []
    refiner.train()
    for step in range(steps):
        batch_rng = substream(master_seed, Purpose.CSI_BATCH, step)
        idx = batch_rng.integers(0, samples.train.shape[0], size=batch_size)
        truth = samples.train[idx]
        noise_rng = substream(master_seed, Purpose.CSI_NOISE, step)
        ls = simulate_ls_batch(truth, sigma, noise_rng)
        target = ls if target_ls else truth
        out = refiner(Tensor(complex_to_planes(ls)))
        loss = refiner_loss(out, complex_to_planes(target))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(loss.item())
    return history


def evaluate_refiner(refiner, samples, snr_db, master_seed, limit=2000):
    """Held-out NMSE of the LS estimate and of the refined estimate."""
    sigma = mimo.snr_to_noise_std(snr_db)
    held = samples.held_out[:limit]
    rng = substream(master_seed, Purpose.CSI_NOISE, 1 << 32)
    ls = simulate_ls_batch(held, sigma, rng)
    was_training = refiner.training
    refiner.eval()
    refined = planes_to_complex(refiner(Tensor(complex_to_planes(ls))).data)
    refiner.train(was_training)
    return nmse(ls, held), nmse(refined, held)


def warn_if_mismatched(checkpoint_path, snr_db):
    """Loading a refiner trained at another SNR is allowed but noisy."""
    expected = checkpoint_name(snr_db)
    name = str(checkpoint_path).rsplit("/", 1)[-1]
    if name != expected:
        warnings.warn(f"refiner checkpoint {name!r} does not match the "
                      f"run SNR ({expected!r} expected)", stacklevel=2)
