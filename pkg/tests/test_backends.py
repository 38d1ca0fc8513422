import importlib.util
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from keystyle.backends import (BACKEND_DIR_ENV, BackendRegistry, ScriptedGuidance, VGGExtractor, backend_digest,
                               make_toy_denoiser, make_toy_extractor, register_real_backends, toy_registry)
from keystyle.core import BackendError, BackendUnavailable, ConfigError
from keystyle.distillation import loss_csds

from conftest import random_plane


def test_toy_extractor_seed_determinism():
    a, b, c = make_toy_extractor(5), make_toy_extractor(5), make_toy_extractor(6)
    assert torch.equal(a.w1, b.w1) and torch.equal(a.w2, b.w2)
    assert backend_digest(a) == backend_digest(b) != backend_digest(c)
    assert a.taps == ("t1", "t2")
    assert not any(p.requires_grad for p in a.parameters())


def test_toy_extractor_is_differentiable(extractor, rng):
    x = random_plane(rng, 8, 8).to_tensor().requires_grad_(True)
    extractor(x)["t2"].sum().backward()
    assert x.grad.abs().sum() > 0


def test_toy_denoiser_kinds(sched):
    with pytest.raises(ConfigError, match="unknown toy denoiser"):
        make_toy_denoiser("perfect", sched)
    d = make_toy_denoiser("identity", sched)
    assert d.prompt == ""
    with pytest.raises(AttributeError):
        d.prompt = "a painting"
    z = torch.zeros(1, 3, 8, 8)
    with pytest.raises(BackendError, match="set_noise"):
        make_toy_denoiser("oracle", sched)(z, z[:, :1], 3)


def test_identity_denoiser_on_zero_prediction(sched):
    t = 20
    y = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    eps = torch.ones_like(y)
    value, grad = loss_csds(make_toy_denoiser("identity", sched), sched, t, y, y[:, :1], eps)
    assert value.item() == pytest.approx((math.sqrt(1 - sched[t]) - 1) ** 2, rel=1e-12)


def test_structure_denoiser_closed_form(sched, rng):
    t = 28
    ab = sched[t]
    cond = np.zeros((8, 8, 1))
    cond[:, 4:] = 1.0
    s = torch.from_numpy(cond.transpose(2, 0, 1))[None]
    y = random_plane(rng, 8, 8).to_tensor(torch.float64)
    eps = torch.from_numpy(rng.standard_normal(y.shape))
    _, grad = loss_csds(make_toy_denoiser("structure", sched), sched, t, y, s, eps)
    expected = math.sqrt(ab) * math.sqrt(ab) / math.sqrt(1 - ab) * (y - s.expand_as(y))
    np.testing.assert_allclose(grad.numpy(), expected.numpy(), atol=1e-6)
    # descent direction points from the prediction toward the condition
    assert torch.all((-grad) * (s.expand_as(y) - y) >= 0)


def test_empty_config_gives_only_toys():
    reg = register_real_backends([])
    assert all(e.toy for e in reg.entries())
    assert {(e.role, e.name) for e in reg.entries()} == {(e.role, e.name) for e in toy_registry().entries()}


def test_one_denoiser_variant(tmp_path):
    (tmp_path / "cn-depth").mkdir()
    reg = register_real_backends([{"role": "denoiser", "name": "cn-depth", "path": str(tmp_path / "cn-depth")}])
    real = [e for e in reg.entries("denoiser") if not e.toy]
    assert [e.name for e in real] == ["cn-depth"]
    assert real[0].latent and real[0].native_range == "-1,1"
    assert reg.available("denoiser", "cn-depth")


def test_wrong_path_is_unavailable_with_path(tmp_path):
    bad = tmp_path / "nowhere" / "vgg19.pth"
    reg = register_real_backends([{"role": "extractor", "name": "vgg", "path": str(bad)}])
    ok, why = reg.entry("extractor", "vgg").probe()
    assert not ok and str(bad) in why
    assert not reg.available("extractor", "vgg")
    with pytest.raises(BackendUnavailable, match="nowhere"):
        reg.resolve("extractor", "vgg")
    with pytest.raises(BackendUnavailable):
        reg.resolve("denoiser", "never-registered")


def test_backend_dir_env_override(tmp_path, monkeypatch):
    (tmp_path / "w.pth").write_bytes(b"")
    monkeypatch.setenv(BACKEND_DIR_ENV, str(tmp_path))
    reg = register_real_backends([{"role": "extractor", "name": "vgg", "path": "w.pth"}], root="/elsewhere")
    assert reg.entry("extractor", "vgg").path == tmp_path / "w.pth"


def test_bad_config_entries():
    with pytest.raises(ConfigError):
        register_real_backends([{"role": "denoiser", "name": "cn-sketch", "path": "x"}])
    with pytest.raises(ConfigError):
        register_real_backends([{"role": "vocoder", "name": "x", "path": "x"}])


def test_vgg_adapter_with_random_weights(tmp_path):
    torch.manual_seed(0)
    ref = VGGExtractor()
    torch.save(ref.state_dict(), tmp_path / "vgg.pth")
    reg = register_real_backends([{"role": "extractor", "name": "vgg", "path": "vgg.pth"}], root=tmp_path)
    e = reg.resolve("extractor", "vgg")
    x = torch.rand(1, 3, 32, 32)
    feats = e(x)
    shapes = {k: tuple(v.shape[1:]) for k, v in feats.items()}
    assert shapes == {"relu1_1": (64, 32, 32), "relu2_1": (128, 16, 16), "relu3_1": (256, 8, 8),
                      "relu4_1": (512, 4, 4), "relu5_1": (512, 2, 2)}
    # standardization happens inside the adapter
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    direct = e.features[:2]((x - mean) / std)
    assert torch.allclose(feats["relu1_1"], direct, atol=1e-6)
    assert torch.all(feats["relu2_1"] >= 0)
    assert not any(p.requires_grad for p in e.parameters())
    xg = x.clone().requires_grad_(True)
    e(xg, ["relu3_1"])["relu3_1"].sum().backward()
    assert xg.grad.abs().sum() > 0


def test_vgg_adapter_rejects_unreadable_weights(tmp_path):
    (tmp_path / "vgg.pth").write_bytes(b"not a state dict")
    reg = register_real_backends([{"role": "extractor", "name": "vgg", "path": str(tmp_path / "vgg.pth")}])
    with pytest.raises(BackendUnavailable, match="vgg.pth"):
        reg.resolve("extractor", "vgg")


class _Edges(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


def test_scripted_annotator(tmp_path):
    torch.manual_seed(0)
    h, w = torch.export.Dim("h", min=8, max=4096), torch.export.Dim("w", min=8, max=4096)
    ep = torch.export.export(_Edges(), (torch.rand(1, 3, 16, 16),), dynamic_shapes={"x": {2: h, 3: w}})
    torch.export.save(ep, str(tmp_path / "depth.pt2"))
    reg = register_real_backends([{"role": "guidance", "name": "depth", "path": str(tmp_path / "depth.pt2")}])
    g = reg.resolve("guidance", "depth")
    assert isinstance(g, ScriptedGuidance) and g.kind == "depth" and g.differentiable
    x = torch.rand(1, 3, 24, 40, requires_grad=True)
    out = g(x)
    assert out.shape == (1, 1, 24, 40) and float(out.detach().min()) >= 0 and float(out.detach().max()) <= 1
    out.sum().backward()
    assert x.grad.abs().sum() > 0
    assert backend_digest(g) == backend_digest(reg.resolve("guidance", "depth"))
    (tmp_path / "broken.pt2").write_bytes(b"zip?")
    reg = register_real_backends([{"role": "guidance", "name": "softedge", "path": str(tmp_path / "broken.pt2")}])
    with pytest.raises(BackendUnavailable, match="broken.pt2"):
        reg.resolve("guidance", "softedge")


@pytest.mark.skipif(importlib.util.find_spec("diffusers") is not None, reason="diffusers is installed")
def test_controlnet_without_diffusers_is_unavailable(tmp_path, sched):
    (tmp_path / "cn-canny").mkdir()
    reg = register_real_backends([{"role": "denoiser", "name": "cn-canny", "path": str(tmp_path / "cn-canny")}])
    with pytest.raises(BackendUnavailable, match="diffusers"):
        reg.resolve("denoiser", "cn-canny", sched=sched)


def test_registry_rejects_unknown_role():
    from keystyle.backends import BackendEntry

    with pytest.raises(ConfigError):
        BackendRegistry().register(BackendEntry("vocoder", "x", lambda e: None))
