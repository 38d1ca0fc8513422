"""Toy backends for tests plus the registry that resolves real pretrained ones.

Toy backends are deterministic and dependency-free. Real backends are only
probed (artifact path exists) until resolved; resolving an unavailable entry
raises :class:`BackendUnavailable` instead of falling back to a toy.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BackendError, BackendUnavailable, ConfigError
from .distillation import CannyGuidance, GuidanceFunction, NoiseSchedule, SobelGuidance, check_step

ROLES = ("extractor", "denoiser", "guidance")
DENOISER_VARIANTS = ("lineart", "depth", "canny", "softedge")
BACKEND_DIR_ENV = "SR_BACKEND_DIR"


class ToyExtractor(nn.Module):
    """Two bias-free convolution stages.

    ``t1`` is the raw first-stage response, ``t2`` the second stage applied to
    ``tanh(t1)``. Zero padding keeps a zero image at zero features.
    """

    taps = ("t1", "t2")

    def __init__(self, seed: int = 0, channels=(8, 16), kernel_size: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c1, c2 = channels
        k = kernel_size
        w1 = torch.randn(c1, 3, k, k, generator=gen, dtype=torch.float64) / (3 * k * k) ** 0.5
        w2 = torch.randn(c2, c1, k, k, generator=gen, dtype=torch.float64) / (c1 * k * k) ** 0.5
        self.register_buffer("w1", w1.float())
        self.register_buffer("w2", w2.float())
        self.kernel_size = k
        self.name = f"toy-extractor-{seed}"

    def forward(self, x: torch.Tensor, layers: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
        layers = self.taps if layers is None else tuple(layers)
        pad = self.kernel_size // 2
        out = {}
        t1 = F.conv2d(x, self.w1.to(x.dtype), padding=pad)
        out["t1"] = t1
        if "t2" in layers:
            out["t2"] = F.conv2d(torch.tanh(t1), self.w2.to(x.dtype), padding=pad)
        return {l: out[l] for l in layers}


def make_toy_extractor(seed: int = 0, kernel_size: int = 3) -> ToyExtractor:
    return ToyExtractor(seed, kernel_size=kernel_size).eval()


class ToyDenoiser:
    prompt = ""
    condition_kind = "any"

    def __init__(self, sched: NoiseSchedule):
        self.sched = sched

    def __setattr__(self, key, value):
        if key == "prompt":
            raise AttributeError("the text prompt is fixed to the empty string")
        super().__setattr__(key, value)


class OracleDenoiser(ToyDenoiser):
    """Returns the noise the harness injected, supplied via :meth:`set_noise`."""

    name = "toy-oracle"

    def __init__(self, sched):
        super().__init__(sched)
        self._eps = None

    def set_noise(self, eps: torch.Tensor) -> None:
        self._eps = eps.detach().clone()

    def __call__(self, z, cond, t):
        check_step(t)
        if self._eps is None:
            raise BackendError("oracle denoiser has no noise wired in; call set_noise first")
        return self._eps.to(z.dtype).expand_as(z).clone()


class IdentityDenoiser(ToyDenoiser):
    name = "toy-identity"

    def __call__(self, z, cond, t):
        check_step(t)
        return z.clone()


class StructureDenoiser(ToyDenoiser):
    """Treats the broadcast condition as the clean image: ``(z - sqrt(ab) s) / sqrt(1 - ab)``."""

    name = "toy-structure"

    def __call__(self, z, cond, t):
        ab = self.sched[t]
        s = cond.to(z.dtype).expand_as(z) if cond.shape[1] == 1 else cond.to(z.dtype)
        return (z - ab ** 0.5 * s) / (1.0 - ab) ** 0.5


_TOY_DENOISERS = {"oracle": OracleDenoiser, "identity": IdentityDenoiser, "structure": StructureDenoiser}


def make_toy_denoiser(kind: str, sched: NoiseSchedule) -> ToyDenoiser:
    try:
        return _TOY_DENOISERS[kind](sched)
    except KeyError:
        raise ConfigError(f"unknown toy denoiser kind {kind!r}; choose from {sorted(_TOY_DENOISERS)}") from None


def backend_digest(obj) -> str:
    """Hash of a backend's frozen parameters (empty digest for parameter-free ones)."""
    h = hashlib.sha256()
    if isinstance(obj, nn.Module):
        for name, t in sorted(obj.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    elif hasattr(obj, "parameters_digest"):
        h.update(obj.parameters_digest())
    return h.hexdigest()


# registry

@dataclass
class BackendEntry:
    role: str
    name: str
    factory: Callable
    path: Path | None = None
    native_range: str = "0,1"
    latent: bool = False
    toy: bool = False
    extra: dict = field(default_factory=dict)

    def probe(self) -> tuple[bool, str]:
        if self.path is None:
            return True, "built in"
        if self.path.exists():
            return True, str(self.path)
        return False, f"artifact not found: {self.path}"


class BackendRegistry:
    def __init__(self):
        self._entries: dict[tuple[str, str], BackendEntry] = {}

    def register(self, entry: BackendEntry) -> None:
        if entry.role not in ROLES:
            raise ConfigError(f"unknown backend role {entry.role!r}")
        self._entries[(entry.role, entry.name)] = entry

    def entries(self, role: str | None = None) -> list[BackendEntry]:
        return [e for (r, _), e in sorted(self._entries.items()) if role is None or r == role]

    def entry(self, role: str, name: str) -> BackendEntry:
        try:
            return self._entries[(role, name)]
        except KeyError:
            raise BackendUnavailable(f"no {role} backend named {name!r}") from None

    def available(self, role: str, name: str) -> bool:
        try:
            return self.entry(role, name).probe()[0]
        except BackendUnavailable:
            return False

    def resolve(self, role: str, name: str, **kwargs):
        e = self.entry(role, name)
        ok, why = e.probe()
        if not ok:
            raise BackendUnavailable(f"{role} backend {name!r} unavailable: {why}")
        return e.factory(e, **kwargs)


def toy_registry() -> BackendRegistry:
    reg = BackendRegistry()
    reg.register(BackendEntry("extractor", "toy", lambda e, seed=0, **_: make_toy_extractor(seed), toy=True))
    for kind in _TOY_DENOISERS:
        reg.register(BackendEntry("denoiser", kind,
                                  lambda e, sched, kind=kind, **_: make_toy_denoiser(kind, sched), toy=True))
    reg.register(BackendEntry("guidance", "canny", lambda e, **_: CannyGuidance(), toy=True))
    reg.register(BackendEntry("guidance", "toy", lambda e, **_: SobelGuidance(), toy=True))
    return reg


def register_real_backends(config=None, root: str | Path | None = None) -> BackendRegistry:
    """Registry with toy entries plus every real backend named in ``config``.

    ``config`` is a list of mappings with keys ``name``, ``role``, ``path`` and
    optionally ``native_range`` and ``latent``. Relative paths resolve against
    ``root``, overridden by the ``SR_BACKEND_DIR`` environment variable.
    """
    reg = toy_registry()
    root = os.environ.get(BACKEND_DIR_ENV) or root
    for item in config or ():
        role, name = item["role"], item["name"]
        path = Path(item["path"])
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        if role == "extractor":
            factory = _vgg_factory
        elif role == "denoiser":
            variant = item.get("variant", name.rsplit("-", 1)[-1])
            if variant not in DENOISER_VARIANTS:
                raise ConfigError(f"denoiser {name!r}: unknown variant {variant!r}")
            factory = _controlnet_factory
        elif role == "guidance":
            factory = _annotator_factory
        else:
            raise ConfigError(f"unknown backend role {role!r}")
        reg.register(BackendEntry(role, name, factory, path=path,
                                  native_range=item.get("native_range", "-1,1" if role == "denoiser" else "0,1"),
                                  latent=bool(item.get("latent", role == "denoiser")),
                                  extra={k: v for k, v in item.items()
                                         if k not in ("role", "name", "path", "native_range", "latent")}))
    return reg


# real adapters

_VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
# first ReLU of each convolution block
VGG_TAPS = {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 20, "relu5_1": 29}


class VGGExtractor(nn.Module):
    """VGG-19 convolutional trunk with ImageNet standardization applied on entry."""

    taps = tuple(VGG_TAPS)

    def __init__(self, state_dict: dict | None = None):
        super().__init__()
        from torchvision.models.vgg import make_layers

        self.features = make_layers(_VGG19_CFG)
        if state_dict is not None:
            sd = {k.removeprefix("features."): v for k, v in state_dict.items() if k.startswith("features.")}
            self.features.load_state_dict(sd or state_dict)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.name = "vgg19"
        self.eval()

    def forward(self, x, layers=None):
        layers = self.taps if layers is None else tuple(layers)
        last = max(VGG_TAPS[l] for l in layers)
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = {}
        for i, layer in enumerate(self.features):
            h = layer(h)
            for tag in layers:
                if VGG_TAPS[tag] == i:
                    out[tag] = h
            if i >= last:
                break
        return out


def _vgg_factory(entry: BackendEntry, **_):
    try:
        sd = torch.load(entry.path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - any load failure makes the entry unusable
        raise BackendUnavailable(f"cannot load VGG weights from {entry.path}: {exc}") from exc
    return VGGExtractor(sd)


class ControlNetDenoiser:
    """Stable Diffusion + ControlNet noise predictor operating in VAE latent space.

    ``encode`` maps a ``[0, 1]`` image to scaled latents (differentiable, so the
    score-distillation gradient reaches the operator through the encoder);
    ``__call__`` predicts noise for latents at a sampler step with an empty
    prompt and the given condition image.
    """

    prompt = ""
    latent = True

    def __init__(self, pipe, sched: NoiseSchedule, variant: str, name: str):
        self.pipe = pipe
        self.sched = sched
        self.condition_kind = variant
        self.name = name
        with torch.no_grad():
            ids = pipe.tokenizer([""], padding="max_length", max_length=pipe.tokenizer.model_max_length,
                                 return_tensors="pt").input_ids
            self._text = pipe.text_encoder(ids)[0]

    def encode(self, y_hat):
        vae = self.pipe.vae
        return vae.encode(y_hat * 2 - 1).latent_dist.mean * vae.config.scaling_factor

    def __call__(self, z, cond, t):
        timestep = torch.tensor([int(self.sched.timesteps[check_step(t)])])
        c = cond.expand(-1, 3, -1, -1) if cond.shape[1] == 1 else cond
        down, mid = self.pipe.controlnet(z, timestep, encoder_hidden_states=self._text,
                                         controlnet_cond=c, return_dict=False)
        return self.pipe.unet(z, timestep, encoder_hidden_states=self._text,
                              down_block_additional_residuals=down, mid_block_additional_residual=mid).sample


def _controlnet_factory(entry: BackendEntry, sched: NoiseSchedule, **_):
    try:
        from diffusers import ControlNetModel, StableDiffusionControlNetPipeline
    except ImportError as exc:
        raise BackendUnavailable(f"denoiser {entry.name!r} needs the 'diffusers' package") from exc
    variant = entry.extra.get("variant", entry.name.rsplit("-", 1)[-1])
    controlnet = ControlNetModel.from_pretrained(entry.path / "controlnet")
    pipe = StableDiffusionControlNetPipeline.from_pretrained(entry.path, controlnet=controlnet,
                                                             safety_checker=None)
    for module in (pipe.unet, pipe.controlnet, pipe.vae, pipe.text_encoder):
        module.requires_grad_(False)
    return ControlNetDenoiser(pipe, sched, variant, entry.name)


class ScriptedGuidance(GuidanceFunction):
    """Neural annotator loaded from an exported program: ``(B, 3, H, W)`` in [0, 1] -> ``(B, 1, H, W)``."""

    differentiable = True

    def __init__(self, module, kind: str):
        self.module = module
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.kind = kind

    def __call__(self, x):
        return self.module(x).clamp(0.0, 1.0)

    def parameters_digest(self) -> bytes:
        return backend_digest(self.module).encode()


def load_annotator(path):
    """``.pt2`` archives from ``torch.export``; anything else is tried as TorchScript."""
    path = Path(path)
    if path.suffix == ".pt2":
        return torch.export.load(str(path)).module()
    return torch.jit.load(str(path), map_location="cpu").eval()


def _annotator_factory(entry: BackendEntry, **_):
    try:
        module = load_annotator(entry.path)
    except Exception as exc:  # noqa: BLE001
        raise BackendUnavailable(f"guidance {entry.name!r}: cannot load annotator from {entry.path}: {exc}") from exc
    return ScriptedGuidance(module, entry.extra.get("kind", entry.name))
