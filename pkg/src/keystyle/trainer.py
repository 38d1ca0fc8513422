"""Stochastic training of the stylization operator.

Each step draws one keyframe ``j`` and one unlabeled frame ``i`` uniformly and
optimizes::

    lambda_k * L_key(f(x_j), y_j) + lambda_v * L_vgg(f(x_i), y_j) + lambda_c * L_csds(f(x_i))

so the pairwise sums are estimated with per-pair normalization. Checkpoint
candidates are scored with the full-sum version of the same objective every
``checkpoint_every`` steps; the lowest total wins, earliest on ties.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backends import BackendRegistry, backend_digest, toy_registry
from .core import (BackendUnavailable, ConfigError, ContractError, FrameDataset, ImagePlane, LossWeights,
                   TrainConfig, write_image)
from .distillation import (GuidanceCache, GuidanceFunction, NoiseSchedule, build_schedule, csds_surrogate,
                           loss_csds, loss_lineart, noise_like)
from .operator import StylizationOperator, apply_operator, init_operator, load_checkpoint, save_checkpoint
from .perceptual import StyleGramCache, loss_key, loss_vgg

log = logging.getLogger(__name__)

SAMPLING_STREAM = 1
TRAIN_NOISE_STREAM = 2
EVAL_NOISE_STREAM = 3
TRACE_COLUMNS = ("step", "l_key", "l_vgg", "l_csds", "total")


class NonFiniteLoss(FloatingPointError):
    pass


def total_loss(weights: LossWeights, lk, lv, lc):
    return weights.lambda_k * lk + weights.lambda_v * lv + weights.lambda_c * lc


@dataclass
class Backends:
    extractor: object
    denoiser: object
    guidance: GuidanceFunction
    schedule: NoiseSchedule
    names: dict = field(default_factory=dict)

    def digests(self) -> dict[str, str]:
        return {role: backend_digest(getattr(self, role)) for role in ("extractor", "denoiser", "guidance")}


def make_backends(cfg: TrainConfig, registry: BackendRegistry | None = None,
                  guidance_kind: str | None = None) -> Backends:
    registry = registry or toy_registry()
    kind = guidance_kind or cfg.guidance_kind
    sched = build_schedule()
    extractor = registry.resolve("extractor", cfg.extractor, seed=0)
    denoiser = registry.resolve("denoiser", cfg.denoiser.format(kind=kind), sched=sched)
    accepts = getattr(denoiser, "condition_kind", "any")
    if accepts not in ("any", kind):
        raise ConfigError(f"denoiser {denoiser.name!r} expects {accepts!r} conditions, guidance kind is {kind!r}")
    guidance = registry.resolve("guidance", kind)
    names = {"extractor": getattr(extractor, "name", cfg.extractor),
             "denoiser": getattr(denoiser, "name", cfg.denoiser),
             "guidance": kind, "schedule": sched.meta.get("sampler", "")}
    return Backends(extractor, denoiser, guidance, sched, names)


@dataclass(frozen=True)
class TraceRow:
    step: int
    l_key: float
    l_vgg: float
    l_csds: float
    total: float


@dataclass(frozen=True)
class Evaluation:
    step: int
    l_key: float
    l_vgg: float
    l_csds: float
    total: float
    ref: object = None


@dataclass
class Snapshot:
    mark: float
    step: int
    elapsed: float
    total: float
    path: str | None = None
    image: ImagePlane | None = None


class RunCache:
    """Per-run tensors and caches that never change during training."""

    def __init__(self, data: FrameDataset, cfg: TrainConfig, backends: Backends):
        self.frames = [f.to_tensor() for f in data.frames]
        self.styles = [s.to_tensor() for s in data.stylized_keyframes]
        self.conditions = GuidanceCache(backends.guidance)
        self.layers = tuple(cfg.feature_layers)
        self.grams = StyleGramCache(backends.extractor, self.layers) if self.layers else None
        self._cond_tensors: dict[int, torch.Tensor] = {}
        self.data = data

    def condition(self, i: int) -> torch.Tensor:
        if i not in self._cond_tensors:
            self._cond_tensors[i] = self.conditions.get(i, self.data.frames[i]).to_tensor()
        return self._cond_tensors[i]

    def style_gram(self, k: int):
        return self.grams.get(k, self.styles[k])


@dataclass
class TrainState:
    step: int
    phi: StylizationOperator
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    cache: RunCache
    trace: list[TraceRow] = field(default_factory=list)
    evaluations: list[Evaluation] = field(default_factory=list)
    best: Evaluation | None = None
    draws: list[tuple[int, int | None]] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    warned_no_unlabeled: bool = False


def init_state(data: FrameDataset, cfg: TrainConfig, backends: Backends) -> TrainState:
    phi = init_operator(cfg.seed, cfg.width_multiplier)
    phi.train()
    opt = torch.optim.AdamW(phi.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, SAMPLING_STREAM])
    return TrainState(step=0, phi=phi, optimizer=opt, rng=rng, cache=RunCache(data, cfg, backends))


def _structure_term(state: TrainState, cfg: TrainConfig, backends: Backends, i: int, y_hat: torch.Tensor,
                    noise_seed_step: int, stream: int):
    """Return ``(reported value, differentiable surrogate)`` of the structure term for frame ``i``."""
    cond = state.cache.condition(i)
    if cfg.objective == "lineart":
        value = loss_lineart(backends.guidance, y_hat, None, target_condition=cond)
        return value.detach(), value
    d = backends.denoiser
    target = d.encode(y_hat) if getattr(d, "latent", False) else y_hat
    eps = noise_like(target.shape, cfg.seed, noise_seed_step, i, stream=stream, dtype=target.dtype)
    if hasattr(d, "set_noise"):
        d.set_noise(eps)
    value, grad = loss_csds(d, backends.schedule, cfg.t_index, target, cond, eps, cfg.sds_weighting)
    return value, csds_surrogate(target, grad)


def draw_pair(state: TrainState, data: FrameDataset) -> tuple[int | None, int, int]:
    """Uniform draw of ``(i, j, k)``: unlabeled frame, keyframe frame index and its position in the keyframe list."""
    keys, unlabeled = data.keyframe_indices, data.unlabeled_indices
    k = int(state.rng.integers(len(keys)))
    i = unlabeled[int(state.rng.integers(len(unlabeled)))] if unlabeled else None
    return i, keys[k], k


def train_step(state: TrainState, data: FrameDataset, cfg: TrainConfig, backends: Backends) -> TrainState:
    i, j, k = draw_pair(state, data)
    w = cfg.weights
    phi = state.phi

    l_key = loss_key(phi(state.cache.frames[j]), state.cache.styles[k])
    zero = torch.zeros((), dtype=l_key.dtype)
    l_vgg, l_c, surrogate = zero, zero, zero
    if i is None:
        if not state.warned_no_unlabeled:
            log.warning("no unlabeled frames: training on the keyframe term only")
            state.warned_no_unlabeled = True
    else:
        y_hat = phi(state.cache.frames[i])
        if not torch.isfinite(y_hat).all():
            raise NonFiniteLoss(f"non-finite prediction at step {state.step} (i={i}, j={j})")
        if state.cache.grams is not None:
            l_vgg = loss_vgg(backends.extractor, y_hat, layers=state.cache.layers, style_gram=state.cache.style_gram(k))
        l_c, surrogate = _structure_term(state, cfg, backends, i, y_hat, state.step, TRAIN_NOISE_STREAM)

    lk, lv, lc = float(l_key.detach()), float(l_vgg.detach()), float(l_c.detach())
    total = total_loss(w, lk, lv, lc)
    if not all(math.isfinite(v) for v in (lk, lv, lc, total)):
        raise NonFiniteLoss(f"non-finite loss at step {state.step} (i={i}, j={j}): "
                            f"l_key={lk}, l_vgg={lv}, l_csds={lc}")

    state.optimizer.zero_grad(set_to_none=True)
    objective = w.lambda_k * l_key
    if i is not None:
        objective = objective + w.lambda_v * l_vgg + w.lambda_c * surrogate
    objective.backward()
    state.optimizer.step()

    state.draws.append((i, j))
    state.step += 1
    state.trace.append(TraceRow(state.step, lk, lv, lc, total))
    return state


@torch.no_grad()
def evaluate(state: TrainState, data: FrameDataset, cfg: TrainConfig, backends: Backends) -> TraceRow:
    """Full-sum losses over every keyframe and every (unlabeled, keyframe) pair.

    The structure term uses a fixed noise panel so totals are comparable across
    evaluations.
    """
    phi = state.phi
    cache = state.cache
    lk = float(np.mean([float(loss_key(phi(cache.frames[j]), cache.styles[k]))
                        for k, j in enumerate(data.keyframe_indices)]))
    lv_terms, lc_terms = [], []
    for i in data.unlabeled_indices:
        y_hat = phi(cache.frames[i])
        if cache.grams is not None:
            lv_terms += [float(loss_vgg(backends.extractor, y_hat, layers=cache.layers, style_gram=cache.style_gram(k)))
                         for k in range(len(data.keyframe_indices))]
        value, _ = _structure_term(state, cfg, backends, i, y_hat, 0, EVAL_NOISE_STREAM)
        lc_terms.append(float(value))
    lv = float(np.mean(lv_terms)) if lv_terms else 0.0
    lc = float(np.mean(lc_terms)) if lc_terms else 0.0
    return TraceRow(state.step, lk, lv, lc, total_loss(cfg.weights, lk, lv, lc))


def record_evaluation(state: TrainState, row: TraceRow, run_dir: Path | None = None) -> Evaluation:
    if run_dir is not None:
        ref = save_checkpoint(run_dir / "checkpoints" / f"step_{row.step:08d}.srckpt", state.phi,
                              step=row.step, total_loss=row.total)
        ref = str(ref)
    else:
        ref = row.step
        state.checkpoints[row.step] = {k: v.detach().clone() for k, v in state.phi.state_dict().items()}
    ev = Evaluation(row.step, row.l_key, row.l_vgg, row.l_csds, row.total, ref)
    state.evaluations.append(ev)
    if state.best is None or ev.total < state.best.total:
        state.best = ev
    return ev


def select_checkpoint(state) -> Evaluation:
    """Evaluation with the lowest total; the earliest one wins ties."""
    evals = state.evaluations if hasattr(state, "evaluations") else list(state)
    if not evals:
        raise ContractError("no evaluations logged; cannot select a checkpoint")
    best = evals[0]
    for ev in evals[1:]:
        if ev.total < best.total:
            best = ev
    return best


def selected_operator(state: TrainState) -> StylizationOperator:
    ev = select_checkpoint(state)
    if isinstance(ev.ref, str):
        return load_checkpoint(ev.ref)
    phi = init_operator(0, state.phi.width_multiplier)
    phi.load_state_dict(state.checkpoints[ev.ref])
    phi.meta = dict(state.phi.meta, step=ev.step, total_loss=ev.total)
    return phi.eval()


def train(data: FrameDataset, cfg: TrainConfig, backends: Backends | None = None, run_dir=None,
          marks: Sequence[float] = (), probe: int | None = None,
          clock: Callable[[], float] = time.monotonic) -> TrainState:
    """Run training to ``max_steps`` or ``max_wallclock`` seconds, whichever first.

    ``marks`` are wall-clock minutes at which the probe frame is stylized and
    the full-sum total recorded (see :func:`log_convergence`).
    """
    cfg.validate()
    backends = backends or make_backends(cfg)
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "snapshots").mkdir(exist_ok=True)
        cfg.to_file(run_dir / "config.cfg")
    state = init_state(data, cfg, backends)
    if probe is None:
        probe = (cfg.probe_frames or data.unlabeled_indices or data.keyframe_indices)[0]
    pending = sorted(float(m) for m in marks)
    start = clock()

    def take_snapshots(elapsed):
        while pending and elapsed >= pending[0] * 60.0:
            mark = pending.pop(0)
            state.phi.eval()
            row = evaluate(state, data, cfg, backends)
            img = apply_operator(state.phi, data.frames[probe])
            state.phi.train()
            snap = Snapshot(mark, state.step, elapsed, row.total, image=img)
            if run_dir is not None:
                snap.path = str(run_dir / "snapshots" / f"mark_{mark:g}min.png")
                write_image(img, snap.path)
            state.snapshots.append(snap)

    take_snapshots(0.0)
    while state.step < cfg.max_steps:
        train_step(state, data, cfg, backends)
        elapsed = clock() - start
        state.elapsed.append(elapsed)
        take_snapshots(elapsed)
        if state.step % cfg.checkpoint_every == 0:
            record_evaluation(state, evaluate(state, data, cfg, backends), run_dir)
        if elapsed >= cfg.max_wallclock:
            log.info("wall-clock budget reached after %d steps", state.step)
            break
    if not state.evaluations or state.evaluations[-1].step != state.step:
        record_evaluation(state, evaluate(state, data, cfg, backends), run_dir)
    if run_dir is not None:
        write_trace(state, run_dir)
    return state


# reporting

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def write_trace(state: TrainState, run_dir: Path) -> None:
    (run_dir / "trace.csv").write_text(trace_csv(state.trace))
    (run_dir / "evaluations.csv").write_text(trace_csv(state.evaluations))


@dataclass
class ConvergenceRow:
    mark: float
    total: float | None
    snapshot: str | None
    step: int | None = None
    present: bool = True


def log_convergence(state: TrainState, marks: Sequence[float]) -> list[ConvergenceRow]:
    """One row per requested mark; marks the run never reached are flagged absent."""
    by_mark = {s.mark: s for s in state.snapshots}
    rows = []
    for m in marks:
        s = by_mark.get(float(m))
        if s is None:
            rows.append(ConvergenceRow(float(m), None, None, None, present=False))
        else:
            rows.append(ConvergenceRow(float(m), s.total, s.path, s.step))
    return rows


def aggregate_convergence(reports: Sequence[Sequence[ConvergenceRow]]) -> list[dict]:
    """Mean and population standard deviation of the total per mark across runs."""
    out = []
    marks = [r.mark for r in reports[0]] if reports else []
    for idx, m in enumerate(marks):
        vals = [rep[idx].total for rep in reports if rep[idx].present]
        out.append({"mark": m, "n": len(vals),
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None})
    return out


def state_summary(state: TrainState) -> dict:
    best = select_checkpoint(state)
    return {"steps": state.step, "selected": {k: v for k, v in asdict(best).items()},
            "final": asdict(state.evaluations[-1])}


def write_json(path, payload) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


__all__ = [
    "Backends", "BackendUnavailable", "ConvergenceRow", "Evaluation", "NonFiniteLoss", "TraceRow", "TrainState",
    "aggregate_convergence", "draw_pair", "evaluate", "init_state", "log_convergence", "make_backends", "record_evaluation",
    "select_checkpoint", "selected_operator", "total_loss", "train", "train_step", "trace_csv",
]
