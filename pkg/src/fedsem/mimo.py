"""2x2 MIMO physical layer: block fading, SVD precoding, pilots, LS.

Conventions fixed here so codewords are bit-reproducible:

- Real codewords map to complex symbols by consecutive pairs
  (y[2k], y[2k+1]) -> y[2k] + i y[2k+1], and symbols are dealt
  round-robin across antenna rows (symbol k -> antenna k mod N_T,
  column k div N_T).
- SNR is pre-fading transmit SNR: unit average symbol power over total
  complex noise variance sigma^2 = 10^(-snr_db/10); each real noise
  component has variance sigma^2/2.
- Pilots are Gamma = sqrt(rho) * I with rho = 1 (data-power parity).
"""

from typing import NamedTuple

import numpy as np

N_T = 2
N_R = 2

SV_CLAMP = 1e-6   # relative floor for singular values in detection


class SymbolBlock(NamedTuple):
    values: np.ndarray   # complex (n_antennas, columns), unit mean power
    scale: float         # multiplier that was applied for normalization


class SvdTriple(NamedTuple):
    u: np.ndarray        # N_R x N_R unitary
    sv: np.ndarray       # singular values, non-increasing
    v_p: np.ndarray      # N_T x N_T unitary (h = u @ diag(sv) @ v_p^H)


def draw_channel(rng, n_r=N_R, n_t=N_T):
    """One block-fading draw with i.i.d. CN(0,1) entries."""
    re = rng.standard_normal((n_r, n_t))
    im = rng.standard_normal((n_r, n_t))
    return (re + 1j * im) * np.sqrt(0.5)


def snr_to_noise_std(snr_db):
    """Noise std per complex dimension for unit-power symbols."""
    return float(10.0 ** (-float(snr_db) / 20.0))


def complex_noise(rng, shape, sigma):
    """Circular complex Gaussian with total variance sigma^2 per entry."""
    per_real = sigma / np.sqrt(2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * per_real


def pack_and_normalize(y, n_t=N_T):
    """Real codeword -> unit-power complex symbol block plus its scale."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0 or y.size % (2 * n_t) != 0:
        raise ValueError(
            f"codeword length {y.size} is not a positive multiple of {2 * n_t}")
    symbols = y[0::2] + 1j * y[1::2]
    block = symbols.reshape(-1, n_t).T
    power = float(np.mean(np.abs(block) ** 2))
    scale = 1.0 / np.sqrt(power) if power > 0.0 else 1.0
    return SymbolBlock(block * scale, scale)


def unpack(block_values, scale, n_t=N_T):
    """Inverse of pack_and_normalize given the recorded scale."""
    symbols = (np.asarray(block_values) / scale).T.reshape(-1)
    y = np.empty(2 * symbols.size)
    y[0::2] = symbols.real
    y[1::2] = symbols.imag
    return y


def svd_decompose(h):
    u, sv, vh = np.linalg.svd(np.asarray(h, dtype=np.complex128))
    return SvdTriple(u, sv, vh.conj().T)


def is_degenerate(sv):
    """True when detection would need clamping (near-singular channel)."""
    top = float(sv[0])
    return top == 0.0 or float(sv[-1]) < SV_CLAMP * top


def precode(y_block, v_p):
    y_block = np.asarray(y_block)
    if v_p.shape[1] != y_block.shape[0]:
        raise ValueError(
            f"precoder {v_p.shape} does not conform to block {y_block.shape}")
    return v_p @ y_block


def channel_apply(z_block, h, sigma, rng):
    z_block = np.asarray(z_block)
    if h.shape[1] != z_block.shape[0]:
        raise ValueError(
            f"channel {h.shape} does not conform to block {z_block.shape}")
    return h @ z_block + complex_noise(rng, (h.shape[0], z_block.shape[1]), sigma)


def regularized_inverse_sv(sv):
    top = float(sv[0])
    if top == 0.0:
        raise ValueError("all-zero singular values: channel estimate is null")
    return 1.0 / np.maximum(sv, SV_CLAMP * top)


def detect(z_hat, u, sv):
    """SVD detection with clamped singular values."""
    inv = regularized_inverse_sv(np.asarray(sv, dtype=np.float64))
    return (inv[:, None] * (u.conj().T @ z_hat))


def make_pilot(n_t=N_T, rho=1.0):
    if rho <= 0.0:
        raise ValueError("pilot power must be positive")
    return np.sqrt(rho) * np.eye(n_t)


def pilot_ls_estimate(h, gamma, sigma, rng):
    """Least-squares estimate from one pilot transmission."""
    gamma = np.asarray(gamma, dtype=np.complex128)
    if abs(np.linalg.det(gamma)) < 1e-12:
        raise ValueError("pilot matrix is singular")
    received = h @ gamma + complex_noise(rng, h.shape, sigma)
    return received @ np.linalg.inv(gamma)


def transmit_codeword(y, h, h_est, sigma, rng, n_t=N_T):
    """Reference chain: pack -> precode -> channel -> detect -> unpack.

    Precoding and detection use h_est (the CSI available to the system);
    the channel itself applies the true h.
    """
    block = pack_and_normalize(y, n_t)
    svd = svd_decompose(h_est)
    z = precode(block.values, svd.v_p)
    z_hat = channel_apply(z, h, sigma, rng)
    y_hat = detect(z_hat, svd.u, svd.sv)
    return unpack(y_hat, block.scale, n_t)


def effective_channel(h, h_est):
    """Constant matrices of the detected linear map for a fixed block.

    Returns (m, d): detect(channel(precode(y))) = m @ y + d @ n, with
    m = Lambda_reg^-1 U^H h V_p and d = Lambda_reg^-1 U^H.
    """
    svd = svd_decompose(h_est)
    inv = regularized_inverse_sv(svd.sv)
    d = inv[:, None] * svd.u.conj().T
    return d @ h @ svd.v_p, d
