"""Frame rendering for inspection: depth as grayscale, keypoint markers, action arrows."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

KEYPOINT_COLOR = (40, 200, 255)
ARROW_COLOR = (230, 30, 30)


def depth_to_rgb(depth: np.ndarray, scale: int = 4) -> Image.Image:
    """Nonzero depth maps to gray levels 64..255; background stays black."""
    d = np.asarray(depth, dtype=np.float64)
    out = np.zeros(d.shape, dtype=np.uint8)
    mask = d > 0
    if mask.any():
        lo, hi = d[mask].min(), d[mask].max()
        span = hi - lo if hi > lo else 1.0
        out[mask] = (64 + 191 * (d[mask] - lo) / span).astype(np.uint8)
    img = Image.fromarray(np.stack([out] * 3, axis=-1), "RGB")
    return img.resize((d.shape[1] * scale, d.shape[0] * scale), Image.NEAREST)


def draw_frame(depth: np.ndarray, keypoints: np.ndarray | None = None, action: np.ndarray | None = None,
               scale: int = 4) -> Image.Image:
    """Render one frame.  ``keypoints`` are (row, col) pixels; ``action`` is
    (xs, ys, xg, yg) in workspace coordinates."""
    img = depth_to_rgb(depth, scale)
    draw = ImageDraw.Draw(img)
    h, w = np.asarray(depth).shape
    if keypoints is not None:
        for r, c in np.asarray(keypoints).reshape(-1, 2):
            x, y = (c + 0.5) * scale, (r + 0.5) * scale
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], outline=KEYPOINT_COLOR, width=2)
    if action is not None:
        xs, ys, xg, yg = (float(v) for v in action)
        p0 = (xs * w * scale, ys * h * scale)
        p1 = (xg * w * scale, yg * h * scale)
        draw.line([p0, p1], fill=ARROW_COLOR, width=2)
        ang = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        for da in (2.6, -2.6):
            draw.line([p1, (p1[0] + 8 * math.cos(ang + da), p1[1] + 8 * math.sin(ang + da))], fill=ARROW_COLOR, width=2)
    return img


def overlay_mask(img: Image.Image) -> np.ndarray:
    """Pixels carrying a keypoint or arrow colour."""
    a = np.asarray(img)
    return np.all(a == KEYPOINT_COLOR, axis=-1) | np.all(a == ARROW_COLOR, axis=-1)


def save_frames(frames: list[Image.Image], out_dir, prefix: str = "frame", gif: bool = True,
                duration_ms: int = 400, pnginfo=None) -> list[Path]:
    """One PNG per frame plus an animated GIF; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out_dir / f"{prefix}_{i:03d}.png"
        f.save(p, format="PNG", pnginfo=pnginfo)
        paths.append(p)
    if gif and frames:
        p = out_dir / f"{prefix}.gif"
        frames[0].save(p, format="GIF", save_all=True, append_images=frames[1:], duration=duration_ms, loop=0)
        paths.append(p)
    return paths
