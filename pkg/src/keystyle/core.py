"""Domain types, frame/keyframe ingestion and run configuration.

Images travel through the pipeline as :class:`ImagePlane` values: ``H x W x C``
float32 arrays in ``[0, 1]``, RGB for frames and single-channel for guidance
conditions. Anything that expects another range converts at its own boundary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MIN_SIDE = 8
SCHEDULE_STEPS = 30
GUIDANCE_KINDS = ("canny", "lineart", "depth", "softedge", "toy")


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class DatasetError(ValueError):
    pass


class PairingError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class FrameReadError(OSError):
    pass


class BackendError(RuntimeError):
    """A backend misbehaved (e.g. returned non-finite output)."""


class BackendUnavailable(BackendError):
    """A requested backend cannot be resolved; never silently replaced."""


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """An ``H x W x C`` image with every value finite and inside ``[0, 1]``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ContractError(f"expected an H x W x C array, got shape {v.shape}")
        if v.shape[0] < MIN_SIDE or v.shape[1] < MIN_SIDE:
            raise ContractError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {v.shape[1]}x{v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ContractError("image contains non-finite values")
        if v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
            raise ContractError("image values must lie in [0, 1]")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImagePlane":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "ImagePlane":
        """Build from a ``(C, H, W)`` or ``(1, C, H, W)`` tensor."""
        t = t.detach()
        if t.ndim == 4:
            t = t[0]
        return cls(t.permute(1, 2, 0).cpu().numpy().astype(np.float32))

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.values * 255.0).astype(np.uint8)

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return a ``(1, C, H, W)`` tensor (a fresh copy)."""
        return torch.from_numpy(self.values.transpose(2, 0, 1).copy()).to(dtype).unsqueeze(0)

    def resized(self, width: int, height: int) -> "ImagePlane":
        return ImagePlane(resample(self.values, width, height))


def resample(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Area averaging when shrinking, bilinear when enlarging."""
    h, w = arr.shape[:2]
    if (w, h) == (width, height):
        return arr
    interp = cv2.INTER_AREA if width <= w and height <= h else cv2.INTER_LINEAR
    out = cv2.resize(np.asarray(arr, dtype=np.float32), (width, height), interpolation=interp)
    if out.ndim == 2:
        out = out[:, :, None]
    return np.clip(out, 0.0, 1.0)


def read_image(path: str | Path) -> ImagePlane:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise FrameReadError(f"cannot read image {path}: {exc}") from exc
    return ImagePlane.from_uint8(arr)


def write_image(plane: ImagePlane, path: str | Path) -> None:
    """Write as 8-bit PNG; single-channel planes are written as grayscale."""
    arr = plane.to_uint8()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(Path(path), format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameReadError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass(frozen=True, eq=False)
class FrameDataset:
    """Target frames plus the stylized keyframes aligned with ``keyframe_indices``."""

    frames: tuple[ImagePlane, ...]
    keyframe_indices: tuple[int, ...]
    stylized_keyframes: tuple[ImagePlane, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "keyframe_indices", tuple(int(k) for k in self.keyframe_indices))
        object.__setattr__(self, "stylized_keyframes", tuple(self.stylized_keyframes))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"{i:04d}" for i in range(len(self.frames))))

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def unlabeled_indices(self) -> tuple[int, ...]:
        keys = set(self.keyframe_indices)
        return tuple(i for i in range(self.n_frames) if i not in keys)

    def keyframe(self, k: int) -> tuple[ImagePlane, ImagePlane]:
        """Return ``(source frame, stylized frame)`` of the ``k``-th keyframe."""
        return self.frames[self.keyframe_indices[k]], self.stylized_keyframes[k]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, plane in zip(self.names, self.frames):
            h.update(name.encode())
            h.update(plane.values.tobytes())
        for k, plane in zip(self.keyframe_indices, self.stylized_keyframes):
            h.update(str(k).encode())
            h.update(plane.values.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Violation:
    index: int | None
    rule: str
    message: str
    severity: str = "error"

    def __str__(self):
        where = "dataset" if self.index is None else f"index {self.index}"
        return f"[{self.severity}] {where}: {self.rule}: {self.message}"


def load_dataset(frame_dir, keyframe_dir, resolution="native") -> FrameDataset:
    """Load frames and stylized keyframes, pairing keyframes to frames by file stem.

    ``resolution`` is ``"native"`` or a ``(width, height)`` pair every image is
    resampled to.
    """
    frame_paths = list_images(frame_dir)
    if not frame_paths:
        raise FrameReadError(f"no image files in {frame_dir}")
    key_paths = list_images(keyframe_dir)
    stem_to_index = {p.stem: i for i, p in enumerate(frame_paths)}
    for kp in key_paths:
        if kp.stem not in stem_to_index:
            raise PairingError(f"keyframe {kp} has no counterpart in {frame_dir}")

    frames = [read_image(p) for p in frame_paths]
    keys = [read_image(p) for p in key_paths]

    if resolution == "native" or resolution is None:
        sizes = {(f.width, f.height) for f in frames}
        if len(sizes) > 1:
            raise DimensionError(f"frames have mixed dimensions {sorted(sizes)}; set a common resolution")
    else:
        width, height = (int(v) for v in resolution)
        frames = [f.resized(width, height) for f in frames]
        keys = [k.resized(width, height) for k in keys]

    return FrameDataset(
        frames=frames,
        keyframe_indices=[stem_to_index[p.stem] for p in key_paths],
        stylized_keyframes=keys,
        names=[p.stem for p in frame_paths],
    )


def validate_dataset(d: FrameDataset) -> list[Violation]:
    out = []
    n = d.n_frames
    if n == 0:
        out.append(Violation(None, "nonempty", "dataset has no frames"))
    if len(d.stylized_keyframes) != len(d.keyframe_indices):
        out.append(Violation(None, "alignment",
                             f"{len(d.stylized_keyframes)} stylized keyframes for {len(d.keyframe_indices)} indices"))
    if not d.keyframe_indices:
        out.append(Violation(None, "keyframes", "at least one keyframe is required"))
    if len(set(d.keyframe_indices)) != len(d.keyframe_indices):
        out.append(Violation(None, "keyframes", "duplicate keyframe indices"))
    for k, (idx, styl) in enumerate(zip(d.keyframe_indices, d.stylized_keyframes)):
        if not 0 <= idx < n:
            out.append(Violation(idx, "range", f"keyframe index outside [0, {n})"))
            continue
        src = d.frames[idx]
        if (styl.width, styl.height) != (src.width, src.height):
            out.append(Violation(idx, "dimensions",
                                 f"stylized keyframe is {styl.width}x{styl.height}, source frame is {src.width}x{src.height}"))
    if d.frames:
        w, h = d.frames[0].width, d.frames[0].height
        for i, f in enumerate(d.frames):
            if (f.width, f.height) != (w, h):
                out.append(Violation(i, "dimensions", f"frame is {f.width}x{f.height}, expected {w}x{h}"))
    if n and d.keyframe_indices and not d.unlabeled_indices:
        out.append(Violation(None, "unlabeled", "no unlabeled frames; training reduces to keyframe reconstruction",
                             severity="warning"))
    return out


@dataclass(frozen=True)
class LossWeights:
    lambda_k: float = 1.0
    lambda_v: float = 100.0
    lambda_c: float = 1e-5

    def __post_init__(self):
        vals = (self.lambda_k, self.lambda_v, self.lambda_c)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ConfigError(f"loss weights must be finite and non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    """Training run configuration. Field names double as config-file keys."""

    learning_rate: float = 3e-5
    max_steps: int = 200_000
    max_wallclock: float = 4 * 3600.0  # seconds
    t_index: int = 28
    feature_layers: tuple[str, ...] = ("t1", "t2")
    guidance_kind: str = "canny"
    seed: int = 0
    checkpoint_every: int = 500
    resolution: tuple[int, int] | str = "native"
    lambda_k: float = 1.0
    lambda_v: float = 100.0
    lambda_c: float = 1e-5
    weight_decay: float = 0.01
    width_multiplier: float = 1.0
    sds_weighting: str = "sqrt_alpha_bar"
    extractor: str = "toy"
    denoiser: str = "structure"
    objective: str = "csds"
    probe_frames: tuple[int, ...] = ()

    def __post_init__(self):
        if isinstance(self.feature_layers, str):
            self.feature_layers = tuple(s for s in self.feature_layers.replace(",", " ").split() if s)
        else:
            self.feature_layers = tuple(self.feature_layers)
        self.probe_frames = tuple(int(i) for i in self.probe_frames)
        if not isinstance(self.resolution, str):
            self.resolution = tuple(int(v) for v in self.resolution)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_k, self.lambda_v, self.lambda_c)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.t_index < SCHEDULE_STEPS:
            raise ConfigError(f"t_index must be in [0, {SCHEDULE_STEPS - 1}], got {self.t_index}")
        if self.guidance_kind not in GUIDANCE_KINDS:
            raise ConfigError(f"unknown guidance_kind {self.guidance_kind!r}")
        if self.lambda_v > 0 and not self.feature_layers:
            raise ConfigError("feature_layers must be nonempty when lambda_v > 0")
        if self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("max_steps must be >= 0 and checkpoint_every >= 1")
        if self.sds_weighting not in ("sqrt_alpha_bar", "unit"):
            raise ConfigError(f"sds_weighting must be 'sqrt_alpha_bar' or 'unit', got {self.sds_weighting!r}")
        if self.objective not in ("csds", "lineart"):
            raise ConfigError(f"objective must be 'csds' or 'lineart', got {self.objective!r}")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        self.weights  # raises on invalid weights
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # flat ``key = value`` text format

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(key, value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.loads(Path(path).read_text())

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


_INT_KEYS = {"max_steps", "t_index", "seed", "checkpoint_every"}
_FLOAT_KEYS = {"learning_rate", "max_wallclock", "lambda_k", "lambda_v", "lambda_c", "weight_decay",
               "width_multiplier"}


def _parse_value(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key == "feature_layers":
            return tuple(s.strip() for s in value.split(",") if s.strip())
        if key == "probe_frames":
            return tuple(int(s) for s in value.split(",") if s.strip())
        if key == "resolution":
            if value == "native":
                return value
            parts = value.lower().replace("x", ",").split(",")
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def make_dataset(frames: Sequence[ImagePlane], keyframes: dict[int, ImagePlane]) -> FrameDataset:
    """Assemble an in-memory dataset from frames and ``{index: stylized}``."""
    idx = sorted(keyframes)
    return FrameDataset(frames=tuple(frames), keyframe_indices=tuple(idx),
                        stylized_keyframes=tuple(keyframes[i] for i in idx))
