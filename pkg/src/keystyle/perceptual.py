"""Frozen feature extraction, Gram statistics and the two appearance losses.

Losses take tensors shaped ``(1, C, H, W)`` (or :class:`ImagePlane` values,
converted on entry) so they stay differentiable with respect to the
prediction.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Protocol

import torch

from .core import ConfigError, ContractError, ImagePlane


class FeatureExtractor(Protocol):
    taps: tuple[str, ...]

    def __call__(self, x: torch.Tensor, layers: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
        ...


def as_batch(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, ImagePlane):
        return x.to_tensor(dtype or torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x if dtype is None else x.to(dtype)


def _check_layers(e: FeatureExtractor, layers) -> tuple[str, ...]:
    layers = tuple(layers)
    if not layers:
        raise ConfigError("feature layer set is empty")
    unknown = [l for l in layers if l not in e.taps]
    if unknown:
        raise ConfigError(f"unknown feature layer(s) {unknown}; extractor taps are {list(e.taps)}")
    return layers


def extract_features(e: FeatureExtractor, img, layer: str) -> torch.Tensor:
    """Feature map ``(C, H, W)`` of ``img`` at tap ``layer``."""
    _check_layers(e, [layer])
    return e(as_batch(img), [layer])[layer][0]


def gram(features: torch.Tensor) -> torch.Tensor:
    """Channel correlation ``G[a, b] = sum_hw F[a] F[b] / (H W)``.

    Accepts ``(C, H, W)`` or batched ``(B, C, H, W)`` maps.
    """
    c, h, w = features.shape[-3:]
    flat = features.reshape(*features.shape[:-3], c, h * w)
    return flat @ flat.transpose(-1, -2) / (h * w)


def loss_key(pred, target) -> torch.Tensor:
    """Mean squared difference over every pixel and channel."""
    pred, target = as_batch(pred), as_batch(target)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target.to(pred.dtype)) ** 2)


def style_grams(e: FeatureExtractor, style_ref, layers, dtype=None) -> dict[str, torch.Tensor]:
    layers = _check_layers(e, layers)
    with torch.no_grad():
        feats = e(as_batch(style_ref, dtype), layers)
    return {l: gram(feats[l]) for l in layers}


def loss_vgg(e: FeatureExtractor, pred, style_ref=None, layers=("t1", "t2"),
             style_gram: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Mean over ``layers`` of the mean squared difference between Gram matrices.

    Pass precomputed ``style_gram`` (see :func:`style_grams`) to skip the
    reference pass; the reference side never carries gradient.
    """
    layers = _check_layers(e, layers)
    pred = as_batch(pred)
    if style_gram is None:
        if style_ref is None:
            raise ContractError("loss_vgg needs style_ref or style_gram")
        style_gram = style_grams(e, style_ref, layers, pred.dtype)
    feats = e(pred, layers)
    terms = [torch.mean((gram(feats[l]) - style_gram[l].to(pred.dtype)) ** 2) for l in layers]
    return torch.stack(terms).mean()


class StyleGramCache:
    """Gram matrices of each stylized keyframe, computed once per (keyframe, dtype)."""

    def __init__(self, extractor: FeatureExtractor, layers):
        self.extractor = extractor
        self.layers = _check_layers(extractor, layers)
        self._cache: dict = {}
        self.misses = 0

    def get(self, key, style_ref, dtype=torch.float32) -> dict[str, torch.Tensor]:
        k = (key, dtype)
        if k not in self._cache:
            self.misses += 1
            self._cache[k] = style_grams(self.extractor, style_ref, self.layers, dtype)
        return self._cache[k]
