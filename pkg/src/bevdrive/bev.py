"""Surround-camera BEV feature extraction and the naive baseline encoder.

Pipeline: a shared convolutional trunk downsamples each camera image 16x;
one 1x1 head predicts a categorical depth distribution per feature cell,
another a context vector. Each frustum point carries alpha * context and is
sum-pooled into an ego-centered grid cell; a second conv stack reduces the
grid to the policy latent. The baseline encoder skips all geometry: per-image
trunk features are pooled, concatenated in camera order, and projected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .errors import ConfigError, ContractViolation

TRUNK_CHANNELS = (16, 32, 64, 64)    # stride-2 conv stack => downsample 16
DOWNSAMPLE = 2 ** len(TRUNK_CHANNELS)
BEV_TRUNK_CHANNELS = (32, 64, 64, 64)


@dataclass(frozen=True)
class DepthBins:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) < 1 or np.any(v <= 0) or np.any(np.diff(v) <= 0):
            raise ConfigError("depth bins must be strictly increasing and positive")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class BevGridSpec:
    x_extent: float = 40.0
    y_extent: float = 40.0
    cell_size: float = 0.5

    def __post_init__(self):
        for extent in (self.x_extent, self.y_extent):
            cells = extent / self.cell_size
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(f"extent {extent} is not a multiple of cell {self.cell_size}")

    @property
    def gx(self) -> int:
        return int(round(self.x_extent / self.cell_size))

    @property
    def gy(self) -> int:
        return int(round(self.y_extent / self.cell_size))


@dataclass
class BevGrid:
    x_extent: float
    y_extent: float
    cell_size: float
    channels: int
    features: np.ndarray     # (channels, gy, gx)

    def __post_init__(self):
        spec = BevGridSpec(self.x_extent, self.y_extent, self.cell_size)
        expect = (self.channels, spec.gy, spec.gx)
        if self.features.shape != expect:
            raise ContractViolation(f"grid features {self.features.shape} != {expect}")

    @property
    def spec(self) -> BevGridSpec:
        return BevGridSpec(self.x_extent, self.y_extent, self.cell_size)


@dataclass
class LiftOutput:
    alpha: np.ndarray        # (cams, n_bins, fh, fw), simplex over axis 1
    context: np.ndarray      # (cams, channels, fh, fw)

    def __post_init__(self):
        col = self.alpha.sum(axis=1)
        if np.any(self.alpha < 0) or np.max(np.abs(col - 1.0)) > 1e-6:
            raise ContractViolation("alpha is not a distribution over depth bins")


@dataclass
class BevConfig:
    num_depth_bins: int = 16
    depth_near: float = 1.0
    depth_far: float = 33.0
    x_extent: float = 40.0
    y_extent: float = 40.0
    cell_size: float = 0.5
    context_channels: int = 32
    latent_dim: int = 128

    def depth_bins(self) -> DepthBins:
        return DepthBins(geometry.default_depth_bins(
            self.num_depth_bins, self.depth_near, self.depth_far))

    def grid_spec(self) -> BevGridSpec:
        return BevGridSpec(self.x_extent, self.y_extent, self.cell_size)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _conv_init(rng, cout, cin, k, dtype):
    std = math.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


def _dense_init(rng, cin, cout, dtype):
    std = math.sqrt(1.0 / cin)
    return (rng.standard_normal((cin, cout)) * std).astype(dtype)


def _param(store: ad.ParamStore, name: str, init_fn):
    if name in store:
        return store[name]
    return store.add(name, init_fn())


def _init_image_trunk(store, prefix, rng, dtype):
    cin = 3
    for i, cout in enumerate(TRUNK_CHANNELS):
        _param(store, f"{prefix}/conv{i}/w", lambda c=cout, ci=cin: _conv_init(rng, c, ci, 3, dtype))
        _param(store, f"{prefix}/conv{i}/b", lambda c=cout: np.zeros(c, dtype))
        cin = cout
    return cin


def _image_trunk_forward(store, prefix, x):
    for i in range(len(TRUNK_CHANNELS)):
        x = ad.relu(ad.conv2d(x, store[f"{prefix}/conv{i}/w"], store[f"{prefix}/conv{i}/b"],
                              stride=2, pad=1))
    return x


def compute_cell_indices(rig: geometry.CameraRig, bins: DepthBins,
                         grid: BevGridSpec, downsample: int = DOWNSAMPLE) -> np.ndarray:
    """Flat BEV cell index of every frustum point, -1 when out of extent.

    Returns (cams * n_bins * fh * fw,) int64 in frustum-major order; the cell
    convention is ix = floor((x + x_extent/2) / cell_size), ties resolving to
    the higher index.
    """
    flat = []
    for intr, extr in rig.cameras:
        frustum = geometry.build_frustum(intr, bins.values, downsample)
        pts = geometry.frustum_to_ego(frustum, extr)
        ix = np.floor((pts[..., 0] + grid.x_extent / 2.0) / grid.cell_size).astype(np.int64)
        iy = np.floor((pts[..., 1] + grid.y_extent / 2.0) / grid.cell_size).astype(np.int64)
        ok = (ix >= 0) & (ix < grid.gx) & (iy >= 0) & (iy < grid.gy)
        idx = np.where(ok, iy * grid.gx + ix, -1)
        flat.append(idx.reshape(-1))
    return np.concatenate(flat)


def canonical_point_order(rig: geometry.CameraRig, cell_index: np.ndarray,
                          points_per_camera: int) -> np.ndarray:
    """Accumulation order for the splat that is independent of camera order.

    Points are sorted by (cell, camera pose fingerprint, in-camera index), so
    permuting the rig's camera list permutes input rows but not the sorted
    sequence; sum pooling in this order is then bit-reproducible. Requires
    distinct camera poses.
    """
    keys = [(tuple(np.round(extr.rotation.ravel(), 12)),
             tuple(np.round(extr.translation, 12))) for _, extr in rig.cameras]
    rank = np.empty(len(keys), dtype=np.int64)
    for r, i in enumerate(sorted(range(len(keys)), key=lambda i: keys[i])):
        rank[i] = r
    tag = (np.repeat(rank, points_per_camera) * points_per_camera
           + np.tile(np.arange(points_per_camera, dtype=np.int64), len(keys)))
    return np.lexsort((tag, cell_index))


class SCBlock:
    """BEV feature extractor bound to a camera rig and a parameter namespace.

    Instances reuse parameters already present in the store under `prefix`,
    so the same weights can be driven through differently ordered rigs.
    """

    def __init__(self, config: BevConfig, rig: geometry.CameraRig,
                 store: ad.ParamStore, prefix: str = "bev",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.rig = rig
        self.store = store
        self.prefix = prefix
        intr = rig.cameras[0][0]
        if intr.width % DOWNSAMPLE or intr.height % DOWNSAMPLE:
            raise ConfigError(f"image {intr.width}x{intr.height} not divisible by {DOWNSAMPLE}")
        self.bins = config.depth_bins()
        self.grid = config.grid_spec()
        if self.grid.gx % DOWNSAMPLE or self.grid.gy % DOWNSAMPLE:
            raise ConfigError(f"BEV grid {self.grid.gy}x{self.grid.gx} not divisible by {DOWNSAMPLE}")
        self.fh = intr.height // DOWNSAMPLE
        self.fw = intr.width // DOWNSAMPLE
        self.cell_index = compute_cell_indices(rig, self.bins, self.grid)
        per_cam = len(self.bins) * self.fh * self.fw
        self.point_order = canonical_point_order(rig, self.cell_index, per_cam)
        self._batch_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

        trunk_out = _init_image_trunk(store, f"{prefix}/trunk", rng, dtype)
        n, c = len(self.bins), config.context_channels
        _param(store, f"{prefix}/depth_head/w", lambda: _conv_init(rng, n, trunk_out, 1, dtype))
        _param(store, f"{prefix}/depth_head/b", lambda: np.zeros(n, dtype))
        _param(store, f"{prefix}/context_head/w", lambda: _conv_init(rng, c, trunk_out, 1, dtype))
        _param(store, f"{prefix}/context_head/b", lambda: np.zeros(c, dtype))
        cin = c
        for i, cout in enumerate(BEV_TRUNK_CHANNELS):
            _param(store, f"{prefix}/bev{i}/w", lambda co=cout, ci=cin: _conv_init(rng, co, ci, 3, dtype))
            _param(store, f"{prefix}/bev{i}/b", lambda co=cout: np.zeros(co, dtype))
            cin = cout
        _param(store, f"{prefix}/head/w", lambda: _dense_init(rng, cin, config.latent_dim, dtype))
        _param(store, f"{prefix}/head/b", lambda: np.zeros(config.latent_dim, dtype))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    # -- batched tensor pipeline (training path) ------------------------------

    def lift_batch(self, images: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """images (B, cams, 3, H, W) -> alpha (B*cams, n, fh, fw), context."""
        b, cams = images.data.shape[0], images.data.shape[1]
        if cams != len(self.rig):
            raise ContractViolation(f"expected {len(self.rig)} cameras, got {cams}")
        flat = ad.reshape(images, (b * cams,) + images.data.shape[2:])
        feats = _image_trunk_forward(self.store, f"{self.prefix}/trunk", flat)
        p = self.store
        logits = ad.conv2d(feats, p[f"{self.prefix}/depth_head/w"], p[f"{self.prefix}/depth_head/b"])
        alpha = ad.softmax(logits, axis=1)
        context = ad.conv2d(feats, p[f"{self.prefix}/context_head/w"], p[f"{self.prefix}/context_head/b"])
        return alpha, context

    def splat_batch(self, alpha: ad.Tensor, context: ad.Tensor, batch: int) -> ad.Tensor:
        """Outer-product point features sum-pooled per frame -> (B, C, gy, gx)."""
        cams, n, c = len(self.rig), len(self.bins), self.config.context_channels
        fh, fw = self.fh, self.fw
        a = ad.reshape(alpha, (batch, cams, n, 1, fh, fw))
        ctx = ad.reshape(context, (batch, cams, 1, c, fh, fw))
        pts = ad.mul(a, ctx)                                   # (B, cams, n, C, fh, fw)
        pts = ad.transpose(pts, (0, 1, 2, 4, 5, 3))            # (B, cams, n, fh, fw, C)
        per_frame = cams * n * fh * fw
        pts = ad.reshape(pts, (batch * per_frame, c))
        cells = self.grid.gy * self.grid.gx
        if batch not in self._batch_cache:
            # camera-order-canonical accumulation, replicated per frame
            order = (self.point_order[None] + np.arange(batch)[:, None] * per_frame).reshape(-1)
            idx = np.tile(self.cell_index, batch)
            offsets = np.repeat(np.arange(batch, dtype=np.int64) * cells, per_frame)
            idx = np.where(idx >= 0, idx + offsets, -1)
            self._batch_cache[batch] = (order, idx[order])
        order, idx = self._batch_cache[batch]
        pooled = ad.scatter_add(ad.gather_rows(pts, order), idx, batch * cells)
        pooled = ad.reshape(pooled, (batch, self.grid.gy, self.grid.gx, c))
        return ad.transpose(pooled, (0, 3, 1, 2))

    def encode_batch(self, grid: ad.Tensor) -> ad.Tensor:
        """(B, C, gy, gx) -> (B, latent_dim)."""
        x = grid
        for i in range(len(BEV_TRUNK_CHANNELS)):
            x = ad.relu(ad.conv2d(x, self.store[f"{self.prefix}/bev{i}/w"],
                                  self.store[f"{self.prefix}/bev{i}/b"], stride=2, pad=1))
        x = ad.tmean(x, axis=(2, 3))
        return ad.dense(x, self.store[f"{self.prefix}/head/w"], self.store[f"{self.prefix}/head/b"])

    def forward_batch(self, images: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        b = images.data.shape[0]
        alpha, context = self.lift_batch(images)
        grid = self.splat_batch(alpha, context, b)
        return self.encode_batch(grid), grid


class BaselineEncoder:
    """Geometry-free image encoder: pooled per-camera features, concatenated
    in camera order (hence order sensitive), densely projected."""

    def __init__(self, config: BevConfig, num_cameras: int, image_hw: tuple,
                 store: ad.ParamStore, prefix: str = "baseline",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        h, w = image_hw
        if w % DOWNSAMPLE or h % DOWNSAMPLE:
            raise ConfigError(f"image {w}x{h} not divisible by {DOWNSAMPLE}")
        self.config = config
        self.num_cameras = num_cameras
        self.store = store
        self.prefix = prefix
        trunk_out = _init_image_trunk(store, f"{prefix}/trunk", rng, dtype)
        _param(store, f"{prefix}/head/w",
               lambda: _dense_init(rng, trunk_out * num_cameras, config.latent_dim, dtype))
        _param(store, f"{prefix}/head/b", lambda: np.zeros(config.latent_dim, dtype))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def forward_batch(self, images: ad.Tensor) -> ad.Tensor:
        b, cams = images.data.shape[0], images.data.shape[1]
        if cams != self.num_cameras:
            raise ContractViolation(f"expected {self.num_cameras} cameras, got {cams}")
        flat = ad.reshape(images, (b * cams,) + images.data.shape[2:])
        feats = _image_trunk_forward(self.store, f"{self.prefix}/trunk", flat)
        pooled = ad.tmean(feats, axis=(2, 3))                  # (B*cams, trunk_out)
        pooled = ad.reshape(pooled, (b, cams * pooled.data.shape[1]))
        return ad.dense(pooled, self.store[f"{self.prefix}/head/w"],
                        self.store[f"{self.prefix}/head/b"])


# ---------------------------------------------------------------------------
# single-frame numpy surface
# ---------------------------------------------------------------------------

def lift(images: np.ndarray, block: SCBlock) -> LiftOutput:
    """images (cams, 3, H, W) -> per-camera depth distributions and contexts."""
    t = ad.Tensor(np.asarray(images)[None])
    alpha, context = block.lift_batch(t)
    return LiftOutput(alpha=alpha.data, context=context.data)


def splat(lift_out: LiftOutput, rig: geometry.CameraRig, frustums: list,
          grid_spec: BevGridSpec) -> BevGrid:
    """Sum-pool outer-product point features into the ego BEV grid.

    `frustums` is one FrustumGrid per rig camera, built with the same
    intrinsics/downsample the lift features came from.
    """
    cams, n, fh, fw = lift_out.alpha.shape
    c = lift_out.context.shape[1]
    if len(frustums) != cams or len(rig) != cams:
        raise ContractViolation(f"{cams} lift cameras vs {len(frustums)} frustums, rig {len(rig)}")
    bins = DepthBins(frustums[0].depth_bins)
    for f in frustums:
        if f.feature_h != fh or f.feature_w != fw or len(f.depth_bins) != n:
            raise ContractViolation("frustum shape does not match lift output")
    downsample = rig.cameras[0][0].height // fh
    idx = compute_cell_indices(rig, bins, grid_spec, downsample)
    order = canonical_point_order(rig, idx, n * fh * fw)
    pts = lift_out.alpha[:, :, None] * lift_out.context[:, None]   # (cams, n, C, fh, fw)
    pts = pts.transpose(0, 1, 3, 4, 2).reshape(-1, c)
    pooled = ad.scatter_add(ad.Tensor(np.ascontiguousarray(pts[order])), idx[order],
                            grid_spec.gy * grid_spec.gx)
    feats = pooled.data.reshape(grid_spec.gy, grid_spec.gx, c).transpose(2, 0, 1)
    return BevGrid(x_extent=grid_spec.x_extent, y_extent=grid_spec.y_extent,
                   cell_size=grid_spec.cell_size, channels=c,
                   features=np.ascontiguousarray(feats))


def bev_encode(grid: BevGrid, block: SCBlock) -> np.ndarray:
    """BEV grid -> policy latent vector (latent_dim,)."""
    t = ad.Tensor(grid.features[None])
    return block.encode_batch(t).data[0]


def extract_bev_features(images: np.ndarray, block: SCBlock) -> tuple[np.ndarray, BevGrid]:
    """Full lift -> splat -> encode pipeline for one frame."""
    t = ad.Tensor(np.asarray(images)[None])
    latent, grid = block.forward_batch(t)
    feats = grid.data[0]
    g = BevGrid(x_extent=block.grid.x_extent, y_extent=block.grid.y_extent,
                cell_size=block.grid.cell_size, channels=feats.shape[0], features=feats)
    return latent.data[0], g


def baseline_image_encode(images: np.ndarray, encoder: BaselineEncoder) -> np.ndarray:
    t = ad.Tensor(np.asarray(images)[None])
    return encoder.forward_batch(t).data[0]
