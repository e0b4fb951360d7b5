"""Keypoints from depth images.

Two detectors share one output format, a feature map ``phi`` (C, h, w) and a
heatmap stack (K, h, w) whose channels each sum to one:

* ``geometric``: farthest-point sampling over the object mask.  Heatmaps are
  one-hot at full resolution; features are the depth, its 5x5 local mean and
  its 5x5 local max.
* ``learned``: a small convolutional encoder and keypoint head trained by
  reconstructing a target frame from a source frame through the transport
  operation.  Its grid is the image downsampled 8x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor

DEFAULT_K = {"rope": 3, "cloth": 8}


class EmptyObservationError(ValueError):
    def __init__(self, msg: str = "empty observation: image has no object pixels"):
        super().__init__(msg)


def default_k(task_id: str) -> int:
    return DEFAULT_K["rope" if task_id.startswith("rope") else "cloth"]


@dataclass(frozen=True)
class KeypointGraph:
    """K nodes with pixel locations (row, col) and d-dim features; fully connected."""

    locations: np.ndarray  # (K, 2) int, image pixels
    features: np.ndarray  # (K, d)
    image_shape: tuple[int, int]

    @property
    def k(self) -> int:
        return self.locations.shape[0]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.k) for j in range(self.k) if i != j]

    def workspace_xy(self) -> np.ndarray:
        """Pixel centres mapped back to normalized workspace (x, y)."""
        h, w = self.image_shape
        return np.stack([(self.locations[:, 1] + 0.5) / w, (self.locations[:, 0] + 0.5) / h], axis=1)

    def node_inputs(self) -> np.ndarray:
        """Raw per-node vector fed to the dynamics model: features then (x, y)."""
        return np.concatenate([self.features, self.workspace_xy()], axis=1).astype(np.float32)


# -- geometric detector ------------------------------------------------------------

def _window_stats(img: np.ndarray, size: int = 5) -> tuple[np.ndarray, np.ndarray]:
    pad = size // 2
    win = sliding_window_view(np.pad(img, pad), (size, size))
    return win.mean(axis=(-2, -1)), win.max(axis=(-2, -1))


def farthest_point_sampling(mask: np.ndarray, k: int) -> np.ndarray:
    """K mask pixels (row, col): seed nearest the centroid, then repeatedly the
    pixel farthest from all chosen ones.  Ties go to the first row-major pixel."""
    pts = np.argwhere(mask).astype(np.float64)  # row-major order
    if len(pts) == 0:
        raise EmptyObservationError()
    d_seed = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    chosen = [int(np.argmin(d_seed))]
    dist = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen].astype(np.int64)


def geometric_detect(image: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float32)
    if k < 1:
        raise ValueError("K must be >= 1")
    if not np.any(img > 0):
        raise EmptyObservationError()
    locs = farthest_point_sampling(img > 0, k)
    heat = np.zeros((k,) + img.shape, dtype=np.float32)
    heat[np.arange(k), locs[:, 0], locs[:, 1]] = 1.0
    local_mean, local_max = _window_stats(img)
    phi = np.stack([img, local_mean, local_max]).astype(np.float32)
    return phi, heat


# -- shared ops -------------------------------------------------------------------------

def extract_keypoints(phi: np.ndarray, heat: np.ndarray, stride: int = 1,
                      image_shape: tuple[int, int] | None = None) -> KeypointGraph:
    """Heatmap-weighted mean features and argmax locations.

    ``v_i`` averages ``heat_i * phi`` over the grid; ``p_i`` is the first
    row-major argmax of ``heat_i``, mapped to image pixels via ``stride``.
    """
    phi, heat = np.asarray(phi), np.asarray(heat)
    if phi.shape[1:] != heat.shape[1:]:
        raise ad.ShapeError(f"feature map grid {phi.shape[1:]} != heatmap grid {heat.shape[1:]}")
    _, h, w = phi.shape
    feats = np.einsum("khw,chw->kc", heat, phi) / (h * w)
    flat = np.argmax(heat.reshape(heat.shape[0], -1), axis=1)
    locs = np.stack([flat // w, flat % w], axis=1) * stride + stride // 2
    shape = image_shape or (h * stride, w * stride)
    return KeypointGraph(locs.astype(np.int64), feats.astype(np.float32), tuple(shape))


def keypoint_mask(heat: np.ndarray) -> np.ndarray:
    """Union mask: each channel rescaled to peak 1, summed over K, clamped to [0, 1]."""
    peak = heat.max(axis=(-2, -1), keepdims=True)
    scaled = np.divide(heat, peak, out=np.zeros_like(heat, dtype=np.float64), where=peak > 0)
    return np.clip(scaled.sum(axis=-3), 0.0, 1.0)


def transport(phi_src: np.ndarray, phi_tgt: np.ndarray, heat_src: np.ndarray, heat_tgt: np.ndarray) -> np.ndarray:
    """Suppress source keypoint regions and paste target keypoint features."""
    if phi_src.shape != phi_tgt.shape or heat_src.shape != heat_tgt.shape or phi_src.shape[-2:] != heat_src.shape[-2:]:
        raise ad.ShapeError(f"transport: shapes {phi_src.shape}, {phi_tgt.shape}, {heat_src.shape}, {heat_tgt.shape}")
    m_src = keypoint_mask(heat_src)[..., None, :, :]
    m_tgt = keypoint_mask(heat_tgt)[..., None, :, :]
    return ((1.0 - m_src) * (1.0 - m_tgt) * phi_src + m_tgt * phi_tgt).astype(phi_src.dtype)


# -- learned detector ----------------------------------------------------------------

@dataclass
class LearnedDetector:
    params: ad.ParamStore
    k: int
    channels: int = 16
    layers: int = 3

    @property
    def stride(self) -> int:
        return 2 ** self.layers

    def metadata(self) -> dict:
        return {"k": self.k, "channels": self.channels, "layers": self.layers}

    def save(self, path, extra: dict | None = None) -> None:
        checkpoint.save(path, self.params.arrays(), {**self.metadata(), **(extra or {})}, namespace="detector")

    @classmethod
    def load(cls, path) -> tuple["LearnedDetector", dict]:
        arrays, meta = checkpoint.load(path, namespace="detector")
        det = init_detector(meta["k"], seed=0, channels=meta["channels"], layers=meta["layers"])
        det.params.load_arrays(arrays)
        return det, meta


def init_detector(k: int, seed: int = 0, channels: int = 16, layers: int = 3) -> LearnedDetector:
    rng = np.random.default_rng(seed)
    ps = ad.ParamStore()

    def conv(name, cin, cout, ksize=3):
        fan = cin * ksize * ksize
        ps.add(f"{name}/w", rng.normal(0, math.sqrt(2.0 / fan), (cout, cin, ksize, ksize)).astype(np.float32))
        ps.add(f"{name}/b", np.zeros(cout, dtype=np.float32))

    for branch in ("enc", "kp"):
        cin = 1
        for i in range(layers):
            conv(f"{branch}{i}", cin, channels)
            cin = channels
    conv("kp_out", channels, k, 1)
    for i in range(layers):
        conv(f"dec{i}", channels, channels if i < layers - 1 else 1)
    return LearnedDetector(ps, k, channels, layers)


def _downsample_stack(x: Tensor, ps: ad.ParamStore, branch: str, layers: int) -> Tensor:
    for i in range(layers):
        x = ad.relu(ad.conv2d(x, ps[f"{branch}{i}/w"], ps[f"{branch}{i}/b"]))
        x = ad.slice_(x, (slice(None), slice(None), slice(None, None, 2), slice(None, None, 2)))
    return x


def _bcast_last(x: Tensor, n: int) -> Tensor:
    """(...,) -> (..., n) by repetition."""
    e = ad.expand(x, n)
    return ad.transpose(e, tuple(range(1, e.ndim)) + (0,))


def learned_forward(det: LearnedDetector, images: Tensor) -> tuple[Tensor, Tensor]:
    """images (B, 1, H, W) -> phi (B, C, h, w), heat (B, K, h, w)."""
    ps = det.params
    phi = _downsample_stack(images, ps, "enc", det.layers)
    logits = ad.conv2d(_downsample_stack(images, ps, "kp", det.layers), ps["kp_out/w"], ps["kp_out/b"])
    b, k, h, w = logits.shape
    heat = ad.reshape(ad.softmax(ad.reshape(logits, (b, k, h * w)), axis=-1), (b, k, h, w))
    return phi, heat


def _mask_tensor(heat: Tensor) -> Tensor:
    b, k, h, w = heat.shape
    flat = ad.reshape(heat, (b, k, h * w))
    peak = _bcast_last(ad.amax(flat, -1), h * w)
    scaled = ad.reshape(flat / peak, (b, k, h, w))
    return _clip01(ad.sum_(scaled, axis=1))


def _clip01(x: Tensor) -> Tensor:
    # peak-rescaled softmax maps are positive, so only the upper bound can bind
    return 1.0 - ad.relu(1.0 - x)


def _channel_bcast(m: Tensor, c: int) -> Tensor:
    """(B, h, w) -> (B, C, h, w)."""
    return ad.transpose(ad.expand(m, c), (1, 0, 2, 3))


def transport_tensor(phi_src: Tensor, phi_tgt: Tensor, heat_src: Tensor, heat_tgt: Tensor) -> Tensor:
    c = phi_src.shape[1]
    m_src = _channel_bcast(_mask_tensor(heat_src), c)
    m_tgt = _channel_bcast(_mask_tensor(heat_tgt), c)
    return (1.0 - m_src) * (1.0 - m_tgt) * phi_src + m_tgt * phi_tgt


def decode(det: LearnedDetector, x: Tensor) -> Tensor:
    ps = det.params
    for i in range(det.layers):
        x = ad.conv2d(ad.upsample2x(x), ps[f"dec{i}/w"], ps[f"dec{i}/b"])
        if i < det.layers - 1:
            x = ad.relu(x)
    return x


def reconstruction_loss(det: LearnedDetector, src: np.ndarray, tgt: np.ndarray) -> Tensor:
    """Mean absolute error of rebuilding ``tgt`` from ``src`` through transport.

    The source branch is evaluated off the tape, so only the target branch and
    the decoder receive gradients.
    """
    src_t = Tensor(src[:, None].astype(np.float32))
    tgt_t = Tensor(tgt[:, None].astype(np.float32))
    phi_s, heat_s = learned_forward(det, src_t)
    phi_s, heat_s = ad.detach(phi_s), ad.detach(heat_s)
    phi_t, heat_t = learned_forward(det, tgt_t)
    recon = decode(det, transport_tensor(phi_s, phi_t, heat_s, heat_t))
    return ad.mean(ad.abs_(recon - tgt_t))


def _frame_pairs(episodes, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for ep in episodes:
        frames = ep.frames if hasattr(ep, "frames") else ep
        n = len(frames)
        if n < 2:
            raise ValueError("each episode needs at least 2 frames")
        for t in range(n):
            s = int(rng.integers(n - 1))
            s = s if s < t else s + 1
            pairs.append((frames[s], frames[t]))
    return pairs


def train_detector(episodes, epochs: int, lr: float = 1e-3, k: int = 3, seed: int = 0,
                   batch_size: int = 16, det: LearnedDetector | None = None,
                   log=None) -> tuple[LearnedDetector, list[float]]:
    """Fit the learned detector by reconstruction.

    ``episodes`` is a list of episodes (or of frame lists).  One epoch visits
    every frame once as a target, paired with a random other frame of the
    same episode as source.  Returns the detector and per-epoch median loss.
    """
    if not episodes or sum(len(e.frames if hasattr(e, "frames") else e) for e in episodes) == 0:
        raise ValueError("empty dataset")
    det = det or init_detector(k, seed)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        pairs = _frame_pairs(episodes, rng)
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            src = np.stack([pairs[i][0] for i in idx])
            tgt = np.stack([pairs[i][1] for i in idx])
            det.params.zero_grad()
            loss = reconstruction_loss(det, src, tgt)
            if not np.isfinite(loss.item()):
                raise ad.GradientError(f"non-finite reconstruction loss at epoch {epoch}, batch {start // batch_size}")
            grads = ad.backward(loss, dict(det.params.items()))
            ad.adam_step(det.params, grads, lr)
            losses.append(loss.item())
        curve.append(float(np.median(losses)))
        if log:
            log(f"detector epoch {epoch + 1}/{epochs} L_rec {curve[-1]:.5f}")
    return det, curve


# -- front door ---------------------------------------------------------------------------

def detect(image: np.ndarray, model: LearnedDetector | None = None, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """(feature map, heatmap) for one depth image.  Geometric when ``model`` is None."""
    if model is None:
        return geometric_detect(image, k)
    img = np.asarray(image, dtype=np.float32)
    if not np.any(img > 0):
        raise EmptyObservationError()
    if model.k != k:
        raise ValueError(f"detector has K={model.k}, asked for K={k}")
    with ad.no_grad():
        phi, heat = learned_forward(model, Tensor(img[None, None]))
    return phi.data[0], heat.data[0]


def encode_image(image: np.ndarray, model: LearnedDetector | None = None, k: int = 3) -> KeypointGraph:
    phi, heat = detect(image, model, k)
    stride = 1 if model is None else model.stride
    return extract_keypoints(phi, heat, stride, image_shape=np.asarray(image).shape)
