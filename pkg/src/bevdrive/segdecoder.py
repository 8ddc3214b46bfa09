"""Interpretability head: decode BEV features into semantic class masks.

A 3-level conv encoder-decoder with skip connections maps the extractor's
BEV grid to background/road/vehicle logits. Trained supervised against
simulator ground truth, either probing a frozen extractor or fine-tuning
extractor and decoder jointly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .simworld import Action, DrivingWorld, ground_truth_bev_mask

NUM_CLASSES = 3                       # background, road, vehicle
CLASS_COLORS = np.array([[0, 0, 0], [128, 128, 128], [220, 40, 40]], np.uint8)

ENC_CHANNELS = (32, 48, 64)
DEC_CHANNELS = (48, 32)


@dataclass
class SegSample:
    """One supervised frame; `images` are kept so the extractor can be
    fine-tuned (grid features alone suffice for frozen probing)."""
    grid: np.ndarray | None           # (C, gy, gx) extractor features
    mask: np.ndarray                  # (gy, gx) classes {0, 1, 2}
    images: np.ndarray | None = None  # (cams, 3, H, W)

    def __post_init__(self):
        if self.grid is not None and self.grid.shape[1:] != self.mask.shape:
            raise ContractViolation(
                f"grid {self.grid.shape} inconsistent with mask {self.mask.shape}")


class SegDecoder:
    """Encoder-decoder over the BEV grid; parameters live in a ParamStore."""

    def __init__(self, channels_in: int, store: ad.ParamStore, prefix: str = "seg",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.store = store
        self.prefix = prefix
        self.channels_in = channels_in

        def conv_p(name, cout, cin, k=3):
            if f"{prefix}/{name}/w" not in store:
                std = math.sqrt(2.0 / (cin * k * k))
                store.add(f"{prefix}/{name}/w",
                          (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype))
                store.add(f"{prefix}/{name}/b", np.zeros(cout, dtype))

        e0, e1, e2 = ENC_CHANNELS
        d1, d0 = DEC_CHANNELS
        conv_p("enc0", e0, channels_in)
        conv_p("enc1", e1, e0)
        conv_p("enc2", e2, e1)
        conv_p("dec1", d1, e2 + e1)
        conv_p("dec0", d0, d1 + e0)
        conv_p("head", NUM_CLASSES, d0, k=1)

    def _c(self, name, x, stride=1, pad=1):
        return ad.conv2d(x, self.store[f"{self.prefix}/{name}/w"],
                         self.store[f"{self.prefix}/{name}/b"], stride=stride, pad=pad)

    def forward(self, grid: ad.Tensor) -> ad.Tensor:
        """(B, C, gy, gx) -> class logits (B, 3, gy, gx)."""
        s0 = ad.relu(self._c("enc0", grid))
        s1 = ad.relu(self._c("enc1", s0, stride=2))
        s2 = ad.relu(self._c("enc2", s1, stride=2))
        u1 = ad.relu(self._c("dec1", ad.concat([ad.upsample2x(s2), s1], axis=1)))
        u0 = ad.relu(self._c("dec0", ad.concat([ad.upsample2x(u1), s0], axis=1)))
        return self._c("head", u0, pad=0)


def decode(grid_features: np.ndarray, decoder: SegDecoder) -> np.ndarray:
    """Single-frame logits (3, gy, gx) for a (C, gy, gx) feature grid."""
    return decoder.forward(ad.Tensor(grid_features[None])).data[0]


def predict_mask(grid_features: np.ndarray, decoder: SegDecoder) -> np.ndarray:
    """Argmax classes; ties resolve to the lowest class index."""
    return np.argmax(decode(grid_features, decoder), axis=0).astype(np.uint8)


def iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Intersection over union for one class; 1.0 when both masks lack it."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def export_mask_image(pred: np.ndarray, gt: np.ndarray, path) -> Path:
    """Side-by-side (gt | prediction) binary pixmap, one pixel per cell."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    gy, gx = gt.shape
    rgb = np.concatenate([CLASS_COLORS[gt], CLASS_COLORS[pred]], axis=1)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (2 * gx, gy))
        fh.write(np.flipud(rgb).tobytes())   # row 0 at the top of the image
    return path


# ---------------------------------------------------------------------------
# dataset collection and training
# ---------------------------------------------------------------------------

def collect_dataset(env: DrivingWorld, grid_spec, n_frames: int, seed: int,
                    map_ids=(3,), congestion: str = "low",
                    frame_stride: int = 4) -> list[SegSample]:
    """Random-policy rollouts; every `frame_stride`-th frame becomes a sample."""
    rng = np.random.default_rng([seed, 17])
    samples: list[SegSample] = []
    episode = 0
    while len(samples) < n_frames:
        map_id = int(map_ids[episode % len(map_ids)])
        obs = env.reset(seed + episode, map_id, congestion)
        step = 0
        while not env.done and len(samples) < n_frames:
            if step % frame_stride == 0:
                mask = ground_truth_bev_mask(env.state, grid_spec)
                samples.append(SegSample(grid=None, mask=mask, images=obs.images.copy()))
            obs, _r, _d, _i = env.step(Action(accel=float(rng.uniform(-1, 1)),
                                              steer=float(rng.uniform(-1, 1))))
            step += 1
        episode += 1
    return samples


@dataclass
class SegTrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    vehicle_iou: float = 0.0
    road_iou: float = 0.0
    background_iou: float = 0.0

    def iou_for(self, cls: int) -> float:
        return (self.background_iou, self.road_iou, self.vehicle_iou)[cls]


def _onehot(mask: np.ndarray) -> np.ndarray:
    out = np.zeros((mask.shape[0], NUM_CLASSES) + mask.shape[1:], np.float32)
    for c in range(NUM_CLASSES):
        out[:, c][mask == c] = 1.0
    return out


def train_decoder(samples: list[SegSample], decoder: SegDecoder, extractor,
                  frozen_extractor: bool = True, epochs: int = 12,
                  learning_rate: float = 3e-3, batch_size: int = 16,
                  val_fraction: float = 0.2, seed: int = 0) -> SegTrainReport:
    """Cross-entropy training; with `frozen_extractor` the SC block is fixed
    (probing), otherwise extractor and decoder update jointly.

    For joint fine-tuning the decoder and extractor must share one
    ParamStore. The train/validation split is deterministic in `seed`; the
    report carries per-epoch losses and held-out per-class IoU.
    """
    rng = np.random.default_rng([seed, 23])
    order = rng.permutation(len(samples))
    n_val = max(int(len(samples) * val_fraction), 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    store = decoder.store

    if frozen_extractor:
        # fixed features: compute every grid once, outside any tape
        for lo in range(0, len(samples), batch_size):
            batch = [s for s in samples[lo:lo + batch_size] if s.grid is None]
            if not batch:
                continue
            images = ad.Tensor(np.stack([s.images for s in batch]))
            grids = extractor.forward_batch(images)[1].data
            for s, g in zip(batch, grids):
                s.grid = g

    def grids_for(batch: list[SegSample]) -> ad.Tensor:
        if frozen_extractor:
            return ad.Tensor(np.stack([s.grid for s in batch]))
        images = ad.Tensor(np.stack([s.images for s in batch]))
        _latent, grid = extractor.forward_batch(images)
        return grid

    report = SegTrainReport()
    for _epoch in range(epochs):
        rng.shuffle(train_idx)
        losses = []
        for lo in range(0, len(train_idx), batch_size):
            batch = [samples[i] for i in train_idx[lo:lo + batch_size]]
            target = _onehot(np.stack([s.mask for s in batch]))
            with ad.Tape() as tape:
                logits = decoder.forward(grids_for(batch))
                loss = ad.cross_entropy_logits(logits, target, axis=1)
                tape.backward(loss)
            ad.adam_step(store, lr=learning_rate)
            losses.append(float(loss.data))
        report.train_losses.append(float(np.mean(losses)))

        val_losses = []
        ious = {c: [] for c in range(NUM_CLASSES)}
        for lo in range(0, len(val_idx), batch_size):
            batch = [samples[i] for i in val_idx[lo:lo + batch_size]]
            target = _onehot(np.stack([s.mask for s in batch]))
            logits = decoder.forward(grids_for(batch))
            shifted = logits.data - logits.data.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            val_losses.append(float(-(target * logp).sum() / (logp.size // NUM_CLASSES)))
            pred = np.argmax(logits.data, axis=1)
            for s, pm in zip(batch, pred):
                for c in range(NUM_CLASSES):
                    ious[c].append(iou(pm, s.mask, c))
        report.val_losses.append(float(np.mean(val_losses)))
        report.background_iou = float(np.mean(ious[0]))
        report.road_iou = float(np.mean(ious[1]))
        report.vehicle_iou = float(np.mean(ious[2]))
    return report
