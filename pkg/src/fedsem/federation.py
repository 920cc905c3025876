"""Federated training of per-device semantic links.

Each device owns a full link (semantic encoder, channel codec, task
decoder, CSI refiner).  A server round sends global weights to every
device, runs local epochs through the simulated channel, averages the
returned weights by shard size, and aggregates task results across
devices (softmax averaging for classification, known-offset panorama
stitching for reconstruction).

Gradients cross the channel by treating the detected linear map and the
noise draw of a batch as constants; the per-sample power-normalization
scale is likewise held fixed during backpropagation.
"""

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import csi as csi_mod
from . import mimo
from .autodiff import Tensor
from .channel_codec import ChannelDecoder, ChannelEncoder, bandwidth_to_length
from .csi import CsiRefiner, complex_to_planes, refiner_loss
from .data import make_scenes, partition
from .hvt import (ClassifyHead, DtcnnDecoder, HvtEncoder, hvt_preset,
                  softmax_scores)
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric
from .nn import AdamW, Conv2d, Linear, Module, linear_lr
from .seeding import Purpose, substream

VIEW_EXTENT = 32

LR_START = 5e-4
LR_END = 1e-4
WEIGHT_DECAY = 0.05
AUX_CSI_WEIGHT = 1.0

DTCNN_WIDTHS = {"desk": (48, 24), "paper": (256, 64)}


# -- loss configuration -------------------------------------------------------

@dataclass(frozen=True)
class KdLossConfig:
    lam: float = 0.5
    tau_k: float = 0.5
    mu: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"trade-off lambda must be in [0, 1], got {self.lam}")
        if self.tau_k <= 0.0:
            raise ValueError(f"distillation temperature must be positive, "
                             f"got {self.tau_k}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"label-smoothing weight must be in [0, 1), "
                             f"got {self.mu}")


def kd_loss(cls_logits, distill_logits, labels, teacher_logits, cfg):
    """Label-smoothed CE on the class head plus softened KL on the
    distill head against the teacher, traded off by lambda."""
    b, k = cls_logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if teacher_logits.shape != (b, k):
        raise ValueError(f"teacher logits shape {teacher_logits.shape} does "
                         f"not match student {(b, k)}")
    one_hot = np.zeros((b, k))
    one_hot[np.arange(b), labels] = 1.0
    smoothed = (1.0 - cfg.mu) * one_hot + cfg.mu / k
    log_p = ad.log_softmax(cls_logits)
    ce = (Tensor(smoothed) * log_p).sum() * (-1.0 / b)

    inv_tau = 1.0 / cfg.tau_k
    log_student = ad.log_softmax(distill_logits * inv_tau)
    log_teacher = _log_softmax_np(np.asarray(teacher_logits) * inv_tau)
    student = ad.exp(log_student)
    kl = (student * (log_student - Tensor(log_teacher))).sum() * (1.0 / b)
    return ce * (1.0 - cfg.lam) + kl * (cfg.lam * cfg.tau_k ** 2)


def _log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def recon_loss(pred, target):
    """Per-image sum of squared pixel errors, averaged over the batch."""
    b = pred.shape[0]
    diff = pred - Tensor(np.asarray(target))
    return (diff * diff).sum() * (1.0 / b)


# -- the per-device model -----------------------------------------------------

class SemanticLink(Module):
    """One device's end-to-end model; the unit of federated averaging."""

    def __init__(self, hvt_cfg, c_l, rng, dtcnn_widths=(48, 24)):
        super().__init__()
        self.hvt_cfg = hvt_cfg
        self.c_l = c_l
        self.encoder = HvtEncoder(hvt_cfg, rng)
        self.chan_enc = ChannelEncoder(hvt_cfg.c_h, c_l, rng)
        self.chan_dec = ChannelDecoder(hvt_cfg.c_h, c_l, rng)
        if hvt_cfg.task == "classify":
            self.head = ClassifyHead(hvt_cfg.channels[-1],
                                     hvt_cfg.num_classes, rng)
        else:
            self.decoder = DtcnnDecoder(hvt_cfg.channels[-1],
                                        hvt_cfg.stage_grids[-1],
                                        hvt_cfg.in_channels, rng,
                                        widths=dtcnn_widths)
        self.refiner = CsiRefiner(rng)

    def encode(self, images):
        """Images (N, C, H, W) -> codewords (N, C_L)."""
        return self.chan_enc(ad.sigmoid(self.encoder(images)))

    def task_output(self, x_hat):
        if self.hvt_cfg.task == "classify":
            return self.head(x_hat)
        return self.decoder(x_hat)


def build_link(task, preset, bandwidth_ratio, rng, image_size=VIEW_EXTENT,
               num_classes=4):
    in_channels = 1 if task == "classify" else 3
    hvt_cfg = hvt_preset(preset, task, in_channels, image_size, num_classes)
    c_l = bandwidth_to_length(bandwidth_ratio, image_size, image_size,
                              in_channels)
    return SemanticLink(hvt_cfg, c_l, rng, dtcnn_widths=DTCNN_WIDTHS[preset])


# -- differentiable transmission ---------------------------------------------

def transmit_batch(y, h, h_est, sigma, rng, n_t=mimo.N_T):
    """Pack, precode, fade, detect, and unpack a batch differentiably.

    ``y`` is a (B, C_L) tensor; ``h`` the true block-fading draw and
    ``h_est`` the CSI used for precoding/detection.  Both matrices, the
    noise draw, and the per-sample power scale enter as constants, so
    gradients flow through the linear signal path only.
    """
    b, c_l = y.shape
    if c_l % (2 * n_t) != 0:
        raise ValueError(f"codeword length {c_l} not a multiple of {2 * n_t}")
    l_c = c_l // (2 * n_t)
    m, d = mimo.effective_channel(h, h_est)
    n_r = m.shape[0]

    pairs = y.data.reshape(b, -1, 2)
    power = np.mean(pairs[:, :, 0] ** 2 + pairs[:, :, 1] ** 2, axis=1)
    scale = np.where(power > 0.0, 1.0 / np.sqrt(np.where(power > 0.0, power, 1.0)), 1.0)
    scale_col = Tensor(scale.reshape(b, 1, 1))
    inv_scale_col = Tensor((1.0 / scale).reshape(b, 1, 1))

    noise = mimo.complex_noise(rng, (b, n_r, l_c), sigma)
    w_eff = np.matmul(d, noise)

    t = ad.reshape(y, (b, c_l // 2, 2))
    re = ad.transpose(ad.reshape(t[:, :, 0], (b, l_c, n_t)), (0, 2, 1))
    im = ad.transpose(ad.reshape(t[:, :, 1], (b, l_c, n_t)), (0, 2, 1))
    re = re * scale_col
    im = im * scale_col

    mr, mi = Tensor(m.real), Tensor(m.imag)
    out_r = ad.matmul(mr, re) - ad.matmul(mi, im) + Tensor(w_eff.real)
    out_i = ad.matmul(mr, im) + ad.matmul(mi, re) + Tensor(w_eff.imag)
    out_r = out_r * inv_scale_col
    out_i = out_i * inv_scale_col

    rr = ad.reshape(ad.transpose(out_r, (0, 2, 1)), (b, c_l // 2, 1))
    ii = ad.reshape(ad.transpose(out_i, (0, 2, 1)), (b, c_l // 2, 1))
    return ad.reshape(ad.concat([rr, ii], axis=2), (b, c_l))


def link_forward_batch(link, images, h, sigma, pilot_rng, data_rng):
    """One batch through pilot estimation, transmission, and decoding.

    Returns (recovered semantics, refined CSI planes tensor, h_U) where
    the planes tensor keeps the refiner differentiable for its
    auxiliary loss and h_U is the complex estimate used for SVD.
    """
    gamma = mimo.make_pilot(h.shape[1])
    h_ls = mimo.pilot_ls_estimate(h, gamma, sigma, pilot_rng)
    h_u_planes = link.refiner(Tensor(complex_to_planes(h_ls)[None]))
    h_u = csi_mod.planes_to_complex(h_u_planes.data[0])
    y = link.encode(images)
    y_hat = transmit_batch(y, h, h_u, sigma, data_rng)
    x_hat = link.chan_dec(y_hat)
    return x_hat, h_u_planes, h_u


# -- teacher ------------------------------------------------------------------

class Teacher(Module):
    """Small frozen convolutional classifier providing soft targets."""

    def __init__(self, in_channels, image_size, num_classes, rng):
        super().__init__()
        self.conv1 = Conv2d(in_channels, 8, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(8, 16, 3, rng, stride=2, padding=1)
        flat = 16 * (image_size // 4) ** 2
        self.fc = Linear(flat, num_classes, rng)

    def forward(self, images):
        x = ad.relu(self.conv1(images))
        x = ad.relu(self.conv2(x))
        n = x.shape[0]
        return self.fc(ad.reshape(x, (n, -1)))


def train_teacher(views, labels, master_seed, num_classes=4, steps=300,
                  batch_size=16, lr=1e-3, threshold=0.9):
    """Centrally train the teacher noise-free; refuse an under-fit one."""
    views = np.asarray(views)
    labels = np.asarray(labels, dtype=np.int64)
    if views.shape[0] == 0:
        raise ValueError("teacher needs a nonempty labeled dataset")
    m, channels, size, _ = views.shape
    teacher = Teacher(channels, size, num_classes,
                      substream(master_seed, Purpose.TEACHER, 0))
    optimizer = AdamW(teacher.parameters(), lr=lr, weight_decay=0.0)
    for step in range(steps):
        rng = substream(master_seed, Purpose.TEACHER, 1 + step)
        idx = rng.integers(0, m, size=min(batch_size, m))
        logits = teacher(Tensor(views[idx]))
        one_hot = np.zeros((idx.size, num_classes))
        one_hot[np.arange(idx.size), labels[idx]] = 1.0
        loss = (Tensor(one_hot) * ad.log_softmax(logits)).sum() * (-1.0 / idx.size)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    predictions = np.argmax(teacher(Tensor(views)).data, axis=-1)
    acc = float(np.mean(predictions == labels))
    if acc < threshold:
        raise RuntimeError(
            f"teacher training accuracy {acc:.3f} is below the required "
            f"{threshold}; refusing to distill from it")
    return teacher, acc


# -- aggregation --------------------------------------------------------------

def fedavg_aggregate(participants):
    """Sample-count-weighted average of state dicts.

    ``participants`` is a list of (state_dict, n_samples); with equal
    counts the result is the plain mean.
    """
    if not participants:
        raise ValueError("nothing to aggregate")
    names = list(participants[0][0].keys())
    total = sum(n for _, n in participants)
    if total <= 0:
        raise ValueError("aggregation needs positive sample counts")
    for state, _ in participants[1:]:
        if list(state.keys()) != names:
            raise ValueError("participants expose different weight names")
        for name in names:
            if state[name].shape != participants[0][0][name].shape:
                raise ValueError(f"shape mismatch for {name!r}")
    out = OrderedDict()
    for name in names:
        acc = np.zeros_like(participants[0][0][name])
        for state, n in participants:
            acc = acc + (n / total) * state[name]
        out[name] = acc
    return out


def aggregate_results_classification(score_vectors):
    """Mean of per-device softmax scores, then lowest-index argmax."""
    scores = np.asarray(list(score_vectors), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("need at least one score vector of equal length")
    sums = scores.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("score vectors must each sum to 1")
    return int(np.argmax(scores.mean(axis=0)))


def stitch_panorama(images, offsets):
    """Place views at known offsets; average overlaps, flag gaps.

    Returns (canvas, covered) where ``covered`` marks pixels touched by
    at least one view.  Uncovered pixels are zero and reported.
    """
    if len(images) == 0:
        raise ValueError("nothing to stitch")
    if len(images) != len(offsets):
        raise ValueError("one offset per image required")
    shape = images[0].shape
    for img in images:
        if img.shape != shape:
            raise ValueError("all views must share one shape")
    h, w = shape[0], shape[1]
    canvas_w = max(dx for dx, _ in offsets) + w
    canvas_h = max(dy for _, dy in offsets) + h
    acc = np.zeros((canvas_h, canvas_w) + shape[2:])
    count = np.zeros((canvas_h, canvas_w))
    for img, (dx, dy) in zip(images, offsets):
        acc[dy:dy + h, dx:dx + w] += img
        count[dy:dy + h, dx:dx + w] += 1.0
    covered = count > 0
    if not covered.all():
        warnings.warn(f"panorama has {int((~covered).sum())} uncovered "
                      f"pixels", stacklevel=2)
    divisor = np.where(covered, count, 1.0)
    canvas = acc / divisor[(...,) + (None,) * (acc.ndim - 2)]
    return canvas, covered


def aggregate_results_reconstruction(images, offsets):
    return stitch_panorama(images, offsets)


# -- local training -----------------------------------------------------------

def _chunks(sequence, size):
    for start in range(0, len(sequence), size):
        yield sequence[start:start + size]


def _shard_arrays(shard):
    """Shard views as (M, C, H, W) plus labels (or None)."""
    views = np.stack([s.pixels for s in shard.samples]).transpose(0, 3, 1, 2)
    labels = None
    if shard.samples[0].label is not None:
        labels = np.asarray([s.label for s in shard.samples], dtype=np.int64)
    return views, labels


def local_update(link, optimizer, views, labels, teacher_logits, kd_cfg,
                 snr_db, master_seed, round_index, device_id, epochs,
                 batch_size, aux_weight=AUX_CSI_WEIGHT):
    """Run E local epochs on one device; returns the mean task loss.

    Channel draws, pilot noise, and data noise come from substreams
    keyed by (round, device, epoch, batch), so results do not depend on
    device execution order.
    """
    sigma = mimo.snr_to_noise_std(snr_db)
    m = views.shape[0]
    if m == 0:
        raise ValueError("device shard is empty")
    task = link.hvt_cfg.task
    loss_total = 0.0
    batches = 0
    link.train()
    for epoch in range(epochs):
        perm = substream(master_seed, Purpose.SHUFFLE, round_index, device_id,
                         epoch).permutation(m)
        for b_i, idx in enumerate(_chunks(perm, batch_size)):
            h = mimo.draw_channel(
                substream(master_seed, Purpose.CHANNEL, round_index,
                          device_id, epoch, b_i))
            pilot_rng = substream(master_seed, Purpose.PILOT_NOISE,
                                  round_index, device_id, epoch, b_i)
            data_rng = substream(master_seed, Purpose.DATA_NOISE,
                                 round_index, device_id, epoch, b_i)
            x_hat, h_u_planes, _ = link_forward_batch(
                link, Tensor(views[idx]), h, sigma, pilot_rng, data_rng)
            if task == "classify":
                cls_logits, distill_logits = link.task_output(x_hat)
                task_loss = kd_loss(cls_logits, distill_logits, labels[idx],
                                    teacher_logits[idx], kd_cfg)
            else:
                decoded = link.task_output(x_hat)
                task_loss = recon_loss(decoded, views[idx])
            aux = refiner_loss(h_u_planes, complex_to_planes(h)[None])
            loss = task_loss + aux * aux_weight
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_total += task_loss.item()
            batches += 1
    return loss_total / batches if batches else float("nan")


# -- data assembly ------------------------------------------------------------

@dataclass
class TaskData:
    train_shards: list
    test_shards: list
    view_extent: int = VIEW_EXTENT


def build_task_data(cfg):
    """Generate train/test scenes from the config seed and partition them."""
    style = "classes" if cfg.task == "classify" else "texture"
    train_rng = substream(cfg.seed, Purpose.DATA)
    test_rng = substream(cfg.seed, Purpose.TEST_DATA)
    train = make_scenes(train_rng, cfg.train_scenes, cfg.devices, cfg.delta,
                        VIEW_EXTENT, style)
    test = make_scenes(test_rng, cfg.test_scenes, cfg.devices, cfg.delta,
                       VIEW_EXTENT, style)
    return TaskData(
        train_shards=partition(train, cfg.devices, cfg.delta, VIEW_EXTENT),
        test_shards=partition(test, cfg.devices, cfg.delta, VIEW_EXTENT))


# -- evaluation ---------------------------------------------------------------

def _eval_transmit(link, views, snr_db, master_seed, round_index, device_id):
    """Numpy-path transmission of a device's test views, fresh h per scene."""
    sigma = mimo.snr_to_noise_std(snr_db)
    y = link.encode(Tensor(views)).data
    y_hat = np.empty_like(y)
    for j in range(y.shape[0]):
        ch_rng = substream(master_seed, Purpose.EVAL_CHANNEL, round_index,
                           device_id, j)
        noise_rng = substream(master_seed, Purpose.EVAL_NOISE, round_index,
                              device_id, j)
        h = mimo.draw_channel(ch_rng)
        gamma = mimo.make_pilot(h.shape[1])
        h_ls = mimo.pilot_ls_estimate(h, gamma, sigma, noise_rng)
        h_u = link.refiner.refine(h_ls)
        y_hat[j] = mimo.transmit_codeword(y[j], h, h_u, sigma, noise_rng)
    return link.chan_dec(Tensor(y_hat))


def evaluate_classification(link, data, snr_db, master_seed, round_index):
    link.eval()
    n_scenes = len(data.test_shards[0].samples)
    device_scores = []
    for shard in data.test_shards:
        views, _ = _shard_arrays(shard)
        x_hat = _eval_transmit(link, views, snr_db, master_seed, round_index,
                               shard.device_id)
        cls_logits, distill_logits = link.task_output(x_hat)
        device_scores.append(softmax_scores(cls_logits, distill_logits))
    link.train()
    correct = 0
    for j in range(n_scenes):
        label = data.test_shards[0].samples[j].label
        predicted = aggregate_results_classification(
            [scores[j] for scores in device_scores])
        correct += int(predicted == label)
    return correct / n_scenes


def evaluate_reconstruction(link, data, snr_db, master_seed, round_index,
                            with_ssim=False):
    link.eval()
    decoded_per_device = []
    for shard in data.test_shards:
        views, _ = _shard_arrays(shard)
        x_hat = _eval_transmit(link, views, snr_db, master_seed, round_index,
                               shard.device_id)
        decoded_per_device.append(link.task_output(x_hat).data)
    link.train()
    n_scenes = len(data.test_shards[0].samples)
    psnrs, ssims = [], []
    for j in range(n_scenes):
        offsets = [shard.samples[j].view_offset for shard in data.test_shards]
        recon = [dec[j].transpose(1, 2, 0) for dec in decoded_per_device]
        truth = [shard.samples[j].pixels for shard in data.test_shards]
        panorama, _ = stitch_panorama(recon, offsets)
        reference, _ = stitch_panorama(truth, offsets)
        psnrs.append(psnr_metric(reference, panorama))
        if with_ssim:
            ssims.append(ssim_metric(reference, panorama))
    if with_ssim:
        return float(np.mean(psnrs)), float(np.mean(ssims))
    return float(np.mean(psnrs))


# -- the server loop ----------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    device_count: int
    snr_db: float
    bandwidth_ratio: float
    delta: float
    train_loss: float
    metric_name: str
    metric_value: float
    seed: int


@dataclass
class FederatedResult:
    state: OrderedDict
    records: list = field(default_factory=list)
    teacher_state: Optional[OrderedDict] = None
    teacher_accuracy: Optional[float] = None


def run_federated_training(cfg, refiner_state=None, progress=None):
    """Execute T global rounds and return weights plus round records.

    ``refiner_state`` preloads a pretrained CSI refiner into every
    device; without one a warning is emitted and the refiner starts from
    random initialization.
    """
    data = build_task_data(cfg)
    rounds = cfg.resolved_rounds
    init_rng = substream(cfg.seed, Purpose.INIT)
    global_link = build_link(cfg.task, cfg.preset, cfg.bandwidth_ratio, init_rng)
    if refiner_state is not None:
        global_link.refiner.load_state_dict(refiner_state)
    else:
        warnings.warn("no pretrained CSI refiner supplied; starting from "
                      "random initialization", stacklevel=2)

    kd_cfg = KdLossConfig(lam=cfg.lam, tau_k=cfg.tau_k, mu=cfg.mu)
    shard_views = []
    shard_labels = []
    for shard in data.train_shards:
        views, labels = _shard_arrays(shard)
        shard_views.append(views)
        shard_labels.append(labels)

    teacher = None
    teacher_acc = None
    teacher_logits = [None] * cfg.devices
    if cfg.task == "classify":
        pooled = np.concatenate(shard_views)
        pooled_labels = np.concatenate(shard_labels)
        teacher, teacher_acc = train_teacher(pooled, pooled_labels, cfg.seed)
        teacher.eval()
        teacher_logits = [teacher(Tensor(v)).data for v in shard_views]

    device_links = [
        build_link(cfg.task, cfg.preset, cfg.bandwidth_ratio,
                   substream(cfg.seed, Purpose.GENERIC, i))
        for i in range(cfg.devices)
    ]

    records = []
    for t in range(rounds):
        lr = linear_lr(t, rounds, LR_START, LR_END)
        global_state = global_link.state_dict()
        participants = []
        losses = []
        for i in range(cfg.devices):
            link = device_links[i]
            link.load_state_dict(global_state)
            optimizer = AdamW(link.parameters(), lr=lr,
                              weight_decay=WEIGHT_DECAY)
            mean_loss = local_update(
                link, optimizer, shard_views[i], shard_labels[i],
                teacher_logits[i], kd_cfg, cfg.snr_db, cfg.seed, t, i,
                cfg.local_epochs, cfg.batch_size)
            participants.append((link.state_dict(), shard_views[i].shape[0]))
            losses.append(mean_loss)
        global_link.load_state_dict(fedavg_aggregate(participants))
        if cfg.task == "classify":
            metric_name = "accuracy"
            value = evaluate_classification(global_link, data, cfg.snr_db,
                                            cfg.seed, t)
        else:
            metric_name = "psnr"
            value = evaluate_reconstruction(global_link, data, cfg.snr_db,
                                            cfg.seed, t)
        record = RoundRecord(t, cfg.devices, cfg.snr_db, cfg.bandwidth_ratio,
                             cfg.delta, float(np.mean(losses)), metric_name,
                             float(value), cfg.seed)
        records.append(record)
        if progress is not None:
            progress(record)
    return FederatedResult(
        state=global_link.state_dict(),
        records=records,
        teacher_state=teacher.state_dict() if teacher is not None else None,
        teacher_accuracy=teacher_acc)
