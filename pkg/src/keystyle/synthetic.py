"""Small procedurally generated sequences for tests and demos."""

from __future__ import annotations

import cv2
import numpy as np

from .core import FrameDataset, ImagePlane, make_dataset


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def shapes_sequence(n_frames: int = 8, size: int = 64, seed: int = 0) -> list[ImagePlane]:
    """Frames with a fixed disk; every frame after the first also shows a moving square."""
    rng = np.random.default_rng(seed)
    h = w = size
    base = np.empty((h, w, 3), np.float32)
    ramp = np.linspace(0.0, 1.0, w, dtype=np.float32)
    base[..., 0] = 0.80 + 0.10 * ramp
    base[..., 1] = 0.78
    base[..., 2] = 0.70 - 0.10 * ramp
    frames = []
    for t in range(n_frames):
        img = base.copy()
        img[_disk(h, w, size * 0.30, size * 0.30, size * 0.16)] = (0.15, 0.25, 0.55)
        if t > 0:
            side = size // 4
            y0 = int(size * 0.55)
            x0 = int(size * 0.15 + (size * 0.55) * t / max(n_frames - 1, 1))
            img[y0:y0 + side, x0:x0 + side] = (0.55, 0.10, 0.10)
        img += rng.normal(0.0, 0.005, img.shape).astype(np.float32)
        frames.append(ImagePlane(np.clip(img, 0.0, 1.0)))
    return frames


def painterly(frame: ImagePlane, blur_sigma: float = 3.0) -> ImagePlane:
    """A structure-softening "style": blurred, warm-tinted, posterized."""
    v = cv2.GaussianBlur(np.asarray(frame.values), (0, 0), blur_sigma)
    tint = np.array([1.05, 0.92, 0.70], np.float32)
    v = np.clip(v * tint + np.array([0.05, 0.04, 0.0], np.float32), 0, 1)
    v = np.round(v * 6) / 6
    return ImagePlane(np.clip(v, 0.0, 1.0))


def shapes_dataset(n_frames: int = 8, size: int = 64, keyframes=(0,), seed: int = 0) -> FrameDataset:
    frames = shapes_sequence(n_frames, size, seed)
    return make_dataset(frames, {k: painterly(frames[k]) for k in keyframes})
