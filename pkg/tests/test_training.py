import dataclasses
import json
import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from msstyle.config import TINY_MODEL, TINY_SCHEDULE, TrainingSchedule
from msstyle.errors import ContractError, InvariantError, MissingInputError, NumericFailure
from msstyle.model import build_model
from msstyle.training import (
    Checkpoint,
    FreezeMask,
    TargetCache,
    Trainer,
    batch_indices,
    distillation_loss,
    group_of,
    lr_at,
    model_from_checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from msstyle.training.checkpoint import KIND_JSON, MAGIC, _record

# --- learning-rate schedule --------------------------------------------------

SCHED = TrainingSchedule(warmup_steps=4000)


def test_lr_step_zero_rejected():
    with pytest.raises(ContractError):
        lr_at(0, SCHED)


def test_lr_ramp_ratio():
    assert lr_at(2000, SCHED) / lr_at(4000, SCHED) == pytest.approx(0.5, rel=1e-12)


def test_lr_peak_and_monotonicity():
    s = TrainingSchedule(warmup_steps=50)
    lrs = [lr_at(k, s) for k in range(1, 201)]
    assert int(np.argmax(lrs)) + 1 == 50
    assert all(a < b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a > b for a, b in zip(lrs[49:], lrs[50:]))


def test_lr_closed_form():
    expected = 1.0 * 256 ** -0.5 * 4000 ** -0.5
    assert lr_at(4000, SCHED) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 100_000))
def test_stage3_scale(step):
    assert lr_at(step, SCHED, stage=3) == pytest.approx(SCHED.stage3_lr_scale * lr_at(step, SCHED), rel=1e-12)


def test_schedule_validation():
    with pytest.raises(ContractError):
        TrainingSchedule(stage3_lr_scale=1.0)
    with pytest.raises(ContractError):
        TrainingSchedule(stage2_steps=0)


# --- Adam --------------------------------------------------------------------

def test_adam_matches_hand_update():
    b1, b2, eps, lr = 0.9, 0.98, 1e-9, 0.1
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([x], lr=lr, betas=(b1, b2), eps=eps)
    m = v = 0.0
    xv = 1.0
    for t in (1, 2, 3):
        opt.zero_grad()
        ((x - 3.0) ** 2).sum().backward()
        opt.step()
        g = 2 * (xv - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xv -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(float(x.detach()) - xv) <= 1e-10


# --- freeze masks ------------------------------------------------------------

def test_group_of():
    assert group_of("extractor.levels.sentence.tokens.tokens") == "extractor.sentence"
    assert group_of("predictor.hce.proj.weight") == "predictor"
    assert group_of("acoustic.mel_out.bias") == "acoustic"
    with pytest.raises(ContractError):
        group_of("mystery.weight")


def test_freeze_mask_phases():
    assert FreezeMask.for_phase(1, 2).trainable == {"extractor.sentence", "acoustic"}
    assert FreezeMask.for_phase(2).trainable == {"predictor"}
    assert FreezeMask.for_phase(3).trainable == {"predictor", "acoustic"}
    with pytest.raises(ContractError):
        FreezeMask.for_phase(1, 4)
    with pytest.raises(ContractError):
        FreezeMask.for_phase(4)


def test_freeze_mask_apply(model):
    trainable = FreezeMask.for_phase(1, 1).apply(model)
    names = {n for n, _ in trainable}
    assert names and all(n.startswith(("extractor.levels.global.", "acoustic.")) for n in names)
    assert not any(p.requires_grad for n, p in model.named_parameters() if n.startswith("predictor."))


# --- distillation loss -------------------------------------------------------

def _triple(D=4, n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(D, generator=g), torch.randn(D, generator=g), torch.randn(n, D, generator=g)


def test_distill_zero_when_equal():
    t = _triple()
    assert float(distillation_loss(t, t)) == 0.0


def test_distill_unit_offset():
    D = 8
    t = _triple(D)
    shifted = (t[0] + torch.eye(D)[2], t[1], t[2])
    assert float(distillation_loss(t, shifted)) == pytest.approx(1 / D, rel=1e-6)


def test_distill_hand_value():
    ext = (torch.zeros(2), torch.zeros(2), torch.zeros(2, 2))
    pred = (torch.tensor([1.0, 1.0]), torch.tensor([2.0, 0.0]), torch.tensor([[1.0, 0.0], [3.0, 1.0]]))
    # 1 + 2 + mean(0.5, 5)
    assert float(distillation_loss(ext, pred)) == pytest.approx(5.75)


def test_distill_permutation_invariant():
    a, b = _triple(seed=1), _triple(seed=2)
    perm = torch.tensor([2, 0, 1])
    pa = (a[0], a[1], a[2][perm])
    pb = (b[0], b[1], b[2][perm])
    assert float(distillation_loss(a, b)) == pytest.approx(float(distillation_loss(pa, pb)), rel=1e-6)


def test_distill_arity_mismatch():
    with pytest.raises(ContractError):
        distillation_loss(_triple(n=3), _triple(n=2))


def test_distill_mask_ignores_padding():
    a, b = _triple(seed=1), _triple(seed=2)
    batch_a = (a[0][None], a[1][None], torch.cat([a[2], torch.zeros(2, 4)])[None])
    batch_b = (b[0][None], b[1][None], torch.cat([b[2], torch.full((2, 4), 9.0)])[None])
    mask = torch.tensor([[True, True, True, False, False]])
    assert float(distillation_loss(batch_a, batch_b, mask)) == pytest.approx(float(distillation_loss(a, b)), rel=1e-6)


# --- batching ----------------------------------------------------------------

def test_batch_indices_stateless_epochs():
    first = [batch_indices(10, 4, 3, 1, 1, k) for k in range(2)]
    assert sorted(np.concatenate(first).tolist()) == sorted(set(np.concatenate(first).tolist()))
    assert np.array_equal(batch_indices(10, 4, 3, 1, 1, 5), batch_indices(10, 4, 3, 1, 1, 5))
    assert not np.array_equal(batch_indices(10, 4, 3, 1, 1, 0), batch_indices(10, 4, 3, 2, 0, 0))


def test_target_cache_equivalence(model, dataset):
    cached = TargetCache(model.extractor, dataset, enabled=True)
    fresh = TargetCache(model.extractor, dataset, enabled=False)
    pred = model.predictor(dataset.batch([1, 5, 2]))
    mask = dataset.batch([1, 5, 2]).subword_mask
    cached.targets([5])
    a = distillation_loss(cached.targets([1, 5, 2]), pred, mask)
    b = distillation_loss(fresh.targets([1, 5, 2]), pred, mask)
    assert torch.equal(a, b)


# --- checkpoint container ----------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    ck = Checkpoint(
        arrays={"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(3.5), "c": np.array([1, 2], np.int64),
                "z": np.zeros((0, 4), np.float32)},
        meta={"m": {"x": [1, 2], "y": "s"}},
        blobs={"raw": b"\x00\x01"},
    )
    write_checkpoint(tmp_path / "x.ckpt", ck)
    back = read_checkpoint(tmp_path / "x.ckpt")
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and np.array_equal(back.arrays[k], v)
    assert back.meta == ck.meta and back.blobs == ck.blobs


def test_checkpoint_skips_unknown_records(tmp_path):
    p = tmp_path / "x.ckpt"
    write_checkpoint(p, Checkpoint(meta={"m": {"k": 1}}))
    with open(p, "ab") as f:
        f.write(_record("future.thing", 99, b"opaque payload"))
        f.write(_record("n", KIND_JSON, b'{"v": 2}'))
    back = read_checkpoint(p)
    assert back.meta == {"m": {"k": 1}, "n": {"v": 2}}


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingInputError):
        read_checkpoint(tmp_path / "nope.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!")
    with pytest.raises(InvariantError):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "new.ckpt").write_bytes(MAGIC + struct.pack("<H", 99))
    with pytest.raises(InvariantError):
        read_checkpoint(tmp_path / "new.ckpt")
    p = tmp_path / "trunc.ckpt"
    write_checkpoint(p, Checkpoint(arrays={"a": np.ones(100, np.float32)}))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(InvariantError):
        read_checkpoint(p)


def test_model_checkpoint_roundtrip(model, dataset, short_schedule, tmp_path):
    t = Trainer(model, dataset, short_schedule)
    t.save(tmp_path / "m.ckpt")
    back = model_from_checkpoint(tmp_path / "m.ckpt")
    for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n


# --- trainer -----------------------------------------------------------------

def _snapshot(model, prefix):
    return {n: p.detach().clone() for n, p in model.named_parameters() if n.startswith(prefix)}


def test_phase_freezing_is_bit_exact(model, dataset, short_schedule):
    t = Trainer(model, dataset, short_schedule)
    before = _snapshot(model, "")
    t.run(stages=(1,), max_steps=6)
    for n, p in model.named_parameters():
        changed = not torch.equal(before[n], p)
        if n.startswith(("extractor.levels.sentence.", "extractor.levels.subword.", "predictor.")):
            assert not changed, n
    assert any(not torch.equal(before[n], p) for n, p in model.named_parameters()
               if n.startswith("extractor.levels.global."))


def test_stage2_touches_only_predictor(model, dataset, short_schedule):
    t = Trainer(model, dataset, short_schedule)
    t.run(stages=(1,))
    before = _snapshot(model, "")
    t.run(stages=(2,))
    for n, p in model.named_parameters():
        assert torch.equal(before[n], p) != n.startswith("predictor."), n


def test_metrics_log_and_checkpoints(model, dataset, short_schedule, tmp_path):
    t = Trainer(model, dataset, short_schedule, work_dir=tmp_path)
    t.run()
    lines = [json.loads(ln) for ln in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in lines if "lr" in r]
    assert [r["step"] for r in steps] == list(range(1, 31))
    assert {r["stage"] for r in steps} == {1, 2, 3}
    assert all({"step", "stage", "loss", "lr"} <= set(r) for r in steps)
    for k in (1, 2, 3):
        assert (tmp_path / f"stage{k}.ckpt").exists()
    assert read_checkpoint(tmp_path / "stage3.ckpt").meta["trainer"]["stage"] == 4


def test_stage3_lr_is_scaled(model, dataset, short_schedule):
    t = Trainer(model, dataset, short_schedule)
    t.run()
    for r in t.history:
        if r.get("stage") == 3 and "lr" in r:
            assert r["lr"] == pytest.approx(short_schedule.stage3_lr_scale * lr_at(r["step"], short_schedule, TINY_MODEL.d_model))


def test_resume_matches_uninterrupted(toy_tools, dataset, short_schedule, tmp_path):
    inv, stats = toy_tools
    a = Trainer(build_model(TINY_MODEL, inv, stats, seed=3), dataset, short_schedule, work_dir=tmp_path / "a")
    a.run()
    b = Trainer(build_model(TINY_MODEL, inv, stats, seed=3), dataset, short_schedule, work_dir=tmp_path / "b")
    b.run(max_steps=9)  # mid stage-1 level 2
    b = Trainer.resume(tmp_path / "b" / "last.ckpt", dataset, work_dir=tmp_path / "b")
    b.run()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    for (n, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), n


def test_nan_loss_aborts_with_diagnostics(model, dataset, short_schedule, tmp_path):
    with torch.no_grad():
        model.acoustic.mel_out.bias.fill_(float("nan"))
    t = Trainer(model, dataset, short_schedule, work_dir=tmp_path)
    t.probe = lambda: 0.0
    with pytest.raises(NumericFailure) as info:
        t.run()
    diag = info.value.diagnostics
    assert diag["step"] == 1 and diag["batch_ids"]
    assert math.isnan(diag["param_norms"]["acoustic"])
    assert (tmp_path / "numeric_failure.json").exists()


@pytest.mark.parametrize("boundary", ["stop", "crash"])
def test_resume_at_phase_boundary(toy_tools, dataset, short_schedule, tmp_path, boundary):
    inv, stats = toy_tools
    a = Trainer(build_model(TINY_MODEL, inv, stats, seed=4), dataset, short_schedule, work_dir=tmp_path / "a")
    a.run()
    b = Trainer(build_model(TINY_MODEL, inv, stats, seed=4), dataset, short_schedule, work_dir=tmp_path / "b",
                checkpoint_every=6)
    if boundary == "stop":
        b.run(max_steps=6)
    else:
        # die during the end-of-phase probe, right after the step-6 checkpoint
        calls, real = [], b.probe

        def crashing():
            calls.append(1)
            if len(calls) == 2:
                raise KeyboardInterrupt
            return real()

        b.probe = crashing
        with pytest.raises(KeyboardInterrupt):
            b.run()
    b = Trainer.resume(tmp_path / "b" / "last.ckpt", dataset, work_dir=tmp_path / "b")
    b.run()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
