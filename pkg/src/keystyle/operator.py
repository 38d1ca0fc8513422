"""The trainable image-to-image stylization network and its checkpoint format.

The network is an encoder-decoder with skip connections and instance
normalization: three stride-2 stages (total downsampling factor 8), a residual
bottleneck and a nearest-upsampling decoder that concatenates the matching
encoder activations. Default widths are 32/64/128/256; ``width_multiplier``
scales all of them, so parameter count scales roughly with its square.

Besides the usual head the output carries a learnable input pass-through gain::

    out = sigmoid(head(h) + gain * logit(clamp(x)))

``gain`` starts at 0, so a fresh network behaves exactly like the plain
encoder-decoder. ``identity=True`` zeroes the head and sets ``gain = 1`` which
turns the operator into a pass-through (used to check the streaming path).
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ContractError, ImagePlane

BASE_WIDTHS = (32, 64, 128, 256)
N_RESIDUAL = 2
CKPT_MAGIC = b"SRCKPT1\n"
CKPT_VERSION = 1
_LOGIT_EPS = 1e-4


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the operator layout."""


class NonFiniteParameters(FloatingPointError):
    pass


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(c, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(c, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class StylizationOperator(nn.Module):
    def __init__(self, width_multiplier: float = 1.0, in_channels: int = 3, out_channels: int = 3):
        super().__init__()
        if width_multiplier <= 0:
            raise ContractError("width_multiplier must be positive")
        widths = [max(1, int(round(w * width_multiplier))) for w in BASE_WIDTHS]
        self.widths = tuple(widths)
        self.width_multiplier = float(width_multiplier)
        self.factor = 2 ** (len(widths) - 1)

        self.stem = nn.Sequential(_block(in_channels, widths[0]), _block(widths[0], widths[0]))
        self.down = nn.ModuleList(
            nn.Sequential(_block(widths[k - 1], widths[k], stride=2), _block(widths[k], widths[k]))
            for k in range(1, len(widths))
        )
        self.bottleneck = nn.Sequential(*(ResidualBlock(widths[-1]) for _ in range(N_RESIDUAL)))
        self.up = nn.ModuleList(_block(widths[k], widths[k - 1]) for k in range(len(widths) - 1, 0, -1))
        self.merge = nn.ModuleList(_block(2 * widths[k - 1], widths[k - 1]) for k in range(len(widths) - 1, 0, -1))
        self.head = nn.Conv2d(widths[0], out_channels, 1)
        self.gain = nn.Parameter(torch.zeros(()))
        self.meta: dict = {"width_multiplier": self.width_multiplier}

    def padded_size(self, h: int, w: int) -> tuple[int, int]:
        f = self.factor
        return max(math.ceil(h / f) * f, 2 * f), max(math.ceil(w / f) * f, 2 * f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map a ``(B, 3, H, W)`` batch in ``[0, 1]`` to stylized output of the same shape."""
        h, w = x.shape[-2:]
        ph, pw = self.padded_size(h, w)
        xp = x
        if (ph, pw) != (h, w):
            mode = "reflect" if ph - h < h and pw - w < w else "replicate"
            xp = F.pad(x, (0, pw - w, 0, ph - h), mode=mode)

        feats = self.stem(xp)
        skips = [feats]
        for stage in self.down:
            feats = stage(feats)
            skips.append(feats)
        feats = self.bottleneck(feats)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips[:-1])):
            feats = up(F.interpolate(feats, scale_factor=2, mode="nearest"))
            feats = merge(torch.cat([feats, skip], dim=1))

        xc = xp.clamp(_LOGIT_EPS, 1 - _LOGIT_EPS)
        logits = self.head(feats) + self.gain * torch.log(xc / (1 - xc))
        return torch.sigmoid(logits)[..., :h, :w]

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteParameters(f"operator parameter {name!r} contains non-finite values")


def init_operator(seed: int, width_multiplier: float = 1.0, identity: bool = False) -> StylizationOperator:
    """Construct an operator with parameters drawn deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        op = StylizationOperator(width_multiplier)
    if identity:
        with torch.no_grad():
            op.head.weight.zero_()
            op.head.bias.zero_()
            op.gain.fill_(1.0)
    op.meta.update(seed=int(seed), identity=bool(identity), parameter_count=op.parameter_count)
    return op


@torch.no_grad()
def apply_operator(phi: StylizationOperator, x: ImagePlane) -> ImagePlane:
    """Stylize a single frame in inference mode."""
    phi.check_finite()
    if x.channels != 3:
        raise ContractError(f"operator expects a 3-channel image, got {x.channels}")
    dtype = next(phi.parameters()).dtype
    y = phi(x.to_tensor(dtype))
    return ImagePlane.from_tensor(y.clamp(0.0, 1.0))


def frozen_copy(phi: StylizationOperator) -> StylizationOperator:
    """Parameter snapshot for read-only inference."""
    clone = StylizationOperator(phi.width_multiplier)
    clone.load_state_dict(phi.state_dict())
    clone.meta = dict(phi.meta)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# checkpoint container:
#   magic (8 bytes) | u32 LE header length | JSON header | raw little-endian float32 tensors

def save_checkpoint(path, phi: StylizationOperator, step: int | None = None, total_loss: float | None = None,
                    **extra) -> Path:
    path = Path(path)
    state = phi.state_dict()
    tensors, offset, blob = [], 0, io.BytesIO()
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blob.write(arr.tobytes())
        offset += arr.nbytes
    meta = dict(phi.meta)
    meta.update(extra)
    meta.update(step=step, total_loss=None if total_loss is None else float(total_loss),
                width_multiplier=phi.width_multiplier)
    header = json.dumps({"version": CKPT_VERSION, "meta": meta, "tensors": tensors}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", data, len(CKPT_MAGIC))
        start = len(CKPT_MAGIC) + 4
        header = json.loads(data[start:start + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = start + hlen
    arrays = {}
    for t in header["tensors"]:
        lo = body + t["offset"]
        chunk = data[lo:lo + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"])
    return header["meta"], arrays


def load_checkpoint(path, into: StylizationOperator | None = None) -> StylizationOperator:
    """Load a checkpoint, into ``into`` if given, else into a fresh operator sized from its header."""
    meta, arrays = read_checkpoint(path)
    op = into if into is not None else StylizationOperator(meta.get("width_multiplier", 1.0))
    expected = op.state_dict()
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the operator layout")
    for name, ref in expected.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, operator expects {tuple(ref.shape)}")
    op.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    op.meta = dict(meta)
    op.eval()
    return op
