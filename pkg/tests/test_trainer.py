import itertools
import logging
import math

import numpy as np
import pytest
import torch

from keystyle.core import ConfigError, ContractError, LossWeights, TrainConfig, make_dataset
from keystyle.perceptual import loss_key, loss_vgg
from keystyle.trainer import (Evaluation, NonFiniteLoss, aggregate_convergence, draw_pair, evaluate, init_state,
                              log_convergence, make_backends, select_checkpoint, selected_operator, total_loss, train,
                              train_step, trace_csv)

from conftest import random_plane

FAST = dict(width_multiplier=0.25, checkpoint_every=5, max_steps=10, learning_rate=1e-3)


def test_total_loss_examples():
    assert total_loss(LossWeights(1.0, 100.0, 1e-5), 0.01, 0.002, 50) == pytest.approx(0.2105, rel=1e-12)
    assert total_loss(LossWeights(0.3, 2.0, 5.0), 0, 0, 0) == 0
    assert total_loss(LossWeights(0.0, 0.0, 1.0), 0.5, 0.25, 7) == 7


def test_total_loss_is_linear(rng):
    w = LossWeights(*rng.uniform(0.1, 2, 3))
    a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    lhs = total_loss(w, *(2 * a + 3 * b))
    assert lhs == pytest.approx(2 * total_loss(w, *a) + 3 * total_loss(w, *b), rel=1e-12)


def test_zero_learning_rate_leaves_parameters_bitwise(tiny_dataset):
    cfg = TrainConfig(learning_rate=0.0, weight_decay=0.0, **{k: v for k, v in FAST.items() if k != "learning_rate"})
    backends = make_backends(cfg)
    state = init_state(tiny_dataset, cfg, backends)
    before = {k: v.clone() for k, v in state.phi.state_dict().items()}
    for _ in range(3):
        train_step(state, tiny_dataset, cfg, backends)
    assert len(state.trace) == 3 and [r.step for r in state.trace] == [1, 2, 3]
    for k, v in state.phi.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_training_is_deterministic(tiny_dataset):
    cfg = TrainConfig(seed=4, **FAST)
    a, b = train(tiny_dataset, cfg), train(tiny_dataset, cfg)
    assert trace_csv(a.trace) == trace_csv(b.trace)
    assert a.draws == b.draws
    assert select_checkpoint(a).step == select_checkpoint(b).step
    c = train(tiny_dataset, cfg.replace(seed=5))
    assert trace_csv(c.trace) != trace_csv(a.trace)


def test_step_index_is_constant_for_a_run(tiny_dataset):
    cfg = TrainConfig(t_index=16, **FAST)
    backends = make_backends(cfg)
    seen = []
    inner = backends.denoiser

    class Recording:
        name, prompt, condition_kind = inner.name, "", "any"

        def __call__(self, z, c, t):
            seen.append(t)
            return inner(z, c, t)

    backends.denoiser = Recording()
    train(tiny_dataset, cfg, backends)
    assert set(seen) == {16}


def test_frozen_backends_untouched(tiny_dataset):
    cfg = TrainConfig(**FAST)
    backends = make_backends(cfg)
    before = backends.digests()
    train(tiny_dataset, cfg, backends)
    assert backends.digests() == before


def test_no_unlabeled_frames_falls_back_to_key_term(rng, caplog):
    frames = [random_plane(rng) for _ in range(2)]
    data = make_dataset(frames, {0: random_plane(rng), 1: random_plane(rng)})
    cfg = TrainConfig(**FAST)
    with caplog.at_level(logging.WARNING, logger="keystyle.trainer"):
        state = train(data, cfg)
    assert any("keyframe term only" in r.message for r in caplog.records)
    assert all(r.l_vgg == 0 and r.l_csds == 0 for r in state.trace)
    assert all(i is None for i, _ in state.draws)


def test_non_finite_loss_reports_draw(tiny_dataset):
    cfg = TrainConfig(**FAST)
    backends = make_backends(cfg)
    state = init_state(tiny_dataset, cfg, backends)
    with torch.no_grad():
        state.phi.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss, match=r"step 0 \(i=\d, j=\d\)"):
        train_step(state, tiny_dataset, cfg, backends)


def test_denoiser_condition_kind_mismatch(tiny_dataset):
    from keystyle.backends import BackendEntry, toy_registry

    reg = toy_registry()

    class Picky:
        name, prompt, condition_kind = "picky", "", "depth"

        def __call__(self, z, c, t):
            return z

    reg.register(BackendEntry("denoiser", "picky", lambda e, **kw: Picky()))
    with pytest.raises(ConfigError, match="depth"):
        make_backends(TrainConfig(denoiser="picky"), reg, "canny")


def _ev(step, total):
    return Evaluation(step, 0.0, 0.0, 0.0, total)


@pytest.mark.parametrize("totals,expected", [([5, 3, 4], 1), ([3, 3], 0), ([9, 7, 5, 2], 3)])
def test_select_checkpoint_examples(totals, expected):
    evals = [_ev(10 * (n + 1), t) for n, t in enumerate(totals)]
    assert select_checkpoint(evals) is evals[expected]


def test_select_checkpoint_empty_and_append_worse():
    with pytest.raises(ContractError):
        select_checkpoint([])
    evals = [_ev(1, 2.0), _ev(2, 1.0)]
    best = select_checkpoint(evals)
    assert select_checkpoint(evals + [_ev(3, 1.5), _ev(4, 1.0)]) is best


def test_evaluate_is_the_full_sum(tiny_dataset):
    cfg = TrainConfig(**FAST)
    backends = make_backends(cfg)
    state = init_state(tiny_dataset, cfg, backends)
    state.phi.eval()
    row = evaluate(state, tiny_dataset, cfg, backends)
    phi, e = state.phi, backends.extractor
    with torch.no_grad():
        keys = tiny_dataset.keyframe_indices
        lk = np.mean([loss_key(phi(tiny_dataset.frames[j].to_tensor()), tiny_dataset.stylized_keyframes[k]).item()
                      for k, j in enumerate(keys)])
        lv = np.mean([loss_vgg(e, phi(tiny_dataset.frames[i].to_tensor()), tiny_dataset.stylized_keyframes[k]).item()
                      for i in tiny_dataset.unlabeled_indices for k in range(len(keys))])
    assert row.l_key == pytest.approx(lk, rel=1e-6)
    assert row.l_vgg == pytest.approx(lv, rel=1e-5)
    assert row.total == pytest.approx(total_loss(cfg.weights, row.l_key, row.l_vgg, row.l_csds), rel=1e-12)


def test_sampled_terms_match_the_drawn_pair(tiny_dataset):
    cfg = TrainConfig(learning_rate=0.0, **{k: v for k, v in FAST.items() if k != "learning_rate"})
    backends = make_backends(cfg)
    state = init_state(tiny_dataset, cfg, backends)
    phi = state.phi
    for _ in range(4):
        train_step(state, tiny_dataset, cfg, backends)
        i, j = state.draws[-1]
        k = tiny_dataset.keyframe_indices.index(j)
        row = state.trace[-1]
        with torch.no_grad():
            assert row.l_key == pytest.approx(
                loss_key(phi(tiny_dataset.frames[j].to_tensor()), tiny_dataset.stylized_keyframes[k]).item(), rel=1e-6)
            assert row.l_vgg == pytest.approx(
                loss_vgg(backends.extractor, phi(tiny_dataset.frames[i].to_tensor()),
                         tiny_dataset.stylized_keyframes[k]).item(), rel=1e-5)


def test_draws_are_uniform_and_weight_independent(tiny_dataset):
    cfg = TrainConfig(seed=3)
    backends = make_backends(cfg)
    a = init_state(tiny_dataset, cfg, backends)
    b = init_state(tiny_dataset, cfg.replace(lambda_c=0.0, lambda_v=7.0), backends)
    da = [draw_pair(a, tiny_dataset) for _ in range(8000)]
    assert da == [draw_pair(b, tiny_dataset) for _ in range(8000)]
    counts = {}
    for i, j, _ in da:
        counts[(i, j)] = counts.get((i, j), 0) + 1
    assert set(counts) == {(i, j) for i in (1, 3) for j in (0, 2)}
    # each of 4 pairs has p = 1/4; allow 4 standard deviations
    sd = math.sqrt(8000 * 0.25 * 0.75)
    assert all(abs(c - 2000) < 4 * sd for c in counts.values())


def test_run_directory_layout(tiny_dataset, tmp_path):
    cfg = TrainConfig(**FAST)
    state = train(tiny_dataset, cfg, run_dir=tmp_path)
    assert (tmp_path / "config.cfg").exists()
    assert TrainConfig.from_file(tmp_path / "config.cfg") == cfg
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_00000005.srckpt",
                                                                           "step_00000010.srckpt"]
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,l_key,l_vgg,l_csds,total" and len(lines) == 11
    assert float(lines[1].split(",")[4]) == state.trace[0].total
    phi = selected_operator(state)
    assert phi.meta["step"] == select_checkpoint(state).step


def test_selected_operator_in_memory(tiny_dataset):
    state = train(tiny_dataset, TrainConfig(**FAST))
    best = select_checkpoint(state)
    phi = selected_operator(state)
    if best.step == state.step:
        for k, v in phi.state_dict().items():
            assert torch.equal(v, state.phi.state_dict()[k])
    assert phi.meta["step"] == best.step


class FakeClock:
    def __init__(self, tick):
        self.t, self.tick = 0.0, tick

    def __call__(self):
        now = self.t
        self.t += self.tick
        return now


MARKS = [1, 2, 3, 6, 10, 20, 45, 90]


def test_log_convergence_rows(tiny_dataset, tmp_path):
    cfg = TrainConfig(**dict(FAST, max_steps=40, checkpoint_every=20))
    state = train(tiny_dataset, cfg, run_dir=tmp_path, marks=MARKS, clock=FakeClock(30.0))
    rows = log_convergence(state, MARKS)
    assert [r.mark for r in rows] == MARKS
    assert [r.present for r in rows] == [True] * 6 + [False] * 2
    assert all((tmp_path / "snapshots" / f"mark_{m}min.png").exists() for m in MARKS[:6])
    assert rows[0].step == 2 and rows[5].step == 40
    assert log_convergence(state, []) == []


def test_aggregate_matches_hand_std(tiny_dataset):
    reports = []
    for seed in (0, 1):
        state = train(tiny_dataset, TrainConfig(seed=seed, **dict(FAST, max_steps=12)), marks=[1, 2, 9],
                      clock=FakeClock(15.0))
        reports.append(log_convergence(state, [1, 2, 9]))
    agg = aggregate_convergence(reports)
    for n, m in enumerate([1, 2]):
        a, b = reports[0][n].total, reports[1][n].total
        mean = (a + b) / 2
        assert agg[n]["mean"] == pytest.approx(mean, rel=1e-12)
        assert agg[n]["std"] == pytest.approx(math.sqrt(((a - mean) ** 2 + (b - mean) ** 2) / 2), rel=1e-12)
    assert agg[2] == {"mark": 9.0, "n": 0, "mean": None, "std": None}


def test_trace_is_strictly_increasing_and_best_is_min(tiny_dataset):
    state = train(tiny_dataset, TrainConfig(**dict(FAST, max_steps=15)))
    steps = [r.step for r in state.trace]
    assert all(a < b for a, b in itertools.pairwise(steps))
    assert state.best.total == min(e.total for e in state.evaluations)
