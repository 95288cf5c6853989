from dataclasses import replace

import numpy as np
import pytest

from permtensor.model import Model, ParameterSet, load_checkpoint
from permtensor.training import (AdamState, AveragedState, TrainConfig, adamw_step, ema_update,
                                 lr_at, normalization_recalibration, run_phase, swa_update,
                                 unfreeze_mask)

GROUPS = ["stem", "stage0", "stage1", "stage2", "encoder", "film", "head"]


def one_param(value, grad, group="head"):
    ps = ParameterSet()
    t = ps.add("w", np.array(value, dtype=float), group)
    t.grad = np.array(grad, dtype=float)
    return ps


def test_adamw_hand_trace():
    cfg = TrainConfig(weight_decay=0.1, adam_eps=1e-8)
    ps = one_param([1.0, -2.0], [0.5, -0.25])
    state = AdamState()
    adamw_step(ps, 0.01, cfg, state)
    # first step: bias-corrected m/sqrt(v) = g/|g|
    expect = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * np.array([0.5, -0.25]) / (
        np.array([0.5, 0.25]) + 1e-8)
    assert np.allclose(ps["w"].data, expect, rtol=0, atol=1e-15)
    # second step with a new gradient, by hand
    ps["w"].grad = np.array([-1.0, 1.0])
    theta = ps["w"].data.copy()
    m = 0.9 * 0.1 * np.array([0.5, -0.25]) + 0.1 * np.array([-1.0, 1.0])
    v = 0.999 * 0.001 * np.array([0.25, 0.0625]) + 0.001 * np.array([1.0, 1.0])
    mhat, vhat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    adamw_step(ps, 0.01, cfg, state)
    expect = theta * (1 - 0.001) - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(ps["w"].data, expect, rtol=0, atol=1e-15)
    assert state.steps["w"] == 2


def test_adamw_skips_frozen_and_requires_grads():
    ps = one_param([1.0], [1.0], group="stem")
    ps.set_trainable_groups(["head"])
    before = ps.blob()
    adamw_step(ps, 0.1, TrainConfig(), AdamState())
    assert ps.blob() == before
    ps.set_trainable_groups(["stem"])
    ps["w"].grad = None
    with pytest.raises(ValueError):
        adamw_step(ps, 0.1, TrainConfig(), AdamState())


def test_lr_schedule_endpoints():
    cfg = TrainConfig(epochs=100, warmup_epochs=10, lr_max=1e-3, lr_min=1e-6)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(55, cfg) == pytest.approx(1e-6 + 0.5 * (1e-3 - 1e-6))
    assert lr_at(100, cfg) == 1e-6
    lrs = [lr_at(e, cfg) for e in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    swa = replace(cfg, swa_start_epoch=80, swa_lr=5e-5)
    assert lr_at(79, swa) == lr_at(79, cfg) and lr_at(80, swa) == 5e-5
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_presets():
    full = TrainConfig.for_phase(4, scale="full")
    assert (full.epochs, full.warmup_epochs, full.lr_max, full.lr_min) == (600, 50, 1e-4, 1e-6)
    assert full.swa_start_epoch == 400 and full.ema_decay == 0.9999
    desk = TrainConfig.for_phase(2)
    assert (desk.epochs, desk.warmup_epochs, desk.unfreeze_epochs) == (200, 17, (17, 50))
    assert TrainConfig.for_phase(3, epochs=60).warmup_epochs == 5
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, warmup_epochs=10)


def test_unfreeze_masks():
    assert unfreeze_mask(10, 2, GROUPS, (50, 150)) == {"head"}
    assert unfreeze_mask(100, 2, GROUPS, (50, 150)) == {"head", "stage1", "stage2"}
    assert unfreeze_mask(200, 2, GROUPS, (50, 150)) == {"head", "stem", "stage0", "stage1", "stage2"}
    assert unfreeze_mask(1, 3, GROUPS) == {"head", "stem", "stage0", "stage1", "stage2"}
    for epoch in (1, 300, 600):
        assert unfreeze_mask(epoch, 4, GROUPS) == {"head", "film", "encoder"}
    with pytest.raises(ValueError):
        unfreeze_mask(1, 5, GROUPS)


def test_swa_algebra(rng):
    snap = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    st = AveragedState()
    for _ in range(7):
        st = swa_update(st, {k: v.copy() for k, v in snap.items()})
    assert all(np.array_equal(st.swa[k], snap[k]) for k in snap) and st.n_models == 7
    snaps = [{"a": rng.standard_normal(5)} for _ in range(9)]
    st = AveragedState()
    for s in snaps:
        st = swa_update(st, s)
    brute = np.mean([s["a"] for s in snaps], axis=0)
    assert np.abs(st.swa["a"] - brute).max() <= 1e-15


def test_ema_algebra(rng):
    st = ema_update(AveragedState(), {"a": np.zeros(3)}, 0.5)
    for _ in range(3):
        cur = {"a": rng.standard_normal(3)}
        st = ema_update(st, cur, 0.0)
        assert np.array_equal(st.ema["a"], cur["a"])
    st = ema_update(AveragedState(), {"a": np.zeros(2)}, 0.9)
    st = ema_update(st, {"a": np.ones(2)}, 0.9)
    assert np.allclose(st.ema["a"], 0.1, rtol=0, atol=1e-16)
    const = {"a": np.array([0.3, 1e-7])}
    st = ema_update(AveragedState(), const, 0.99)
    for _ in range(50):
        st = ema_update(st, const, 0.99)
    assert np.array_equal(st.ema["a"], const["a"])
    with pytest.raises(ValueError):
        ema_update(st, const, 1.0)


def test_recalibration_is_noop_for_layer_norm(tiny_model_cfg):
    m = Model(tiny_model_cfg)
    before = m.params.blob()
    assert normalization_recalibration(m) is m and m.params.blob() == before

    class Stub:
        calls = 0

        def has_normalization_statistics(self):
            return True

        def refresh_normalization_statistics(self, images, porosity):
            Stub.calls += 1

    normalization_recalibration(Stub(), np.zeros((1, 4, 4)), np.zeros(1))
    assert Stub.calls == 1


@pytest.fixture(scope="module")
def phase2_run(small_dataset, tmp_path_factory):
    from permtensor.model import ModelConfig
    cfg = ModelConfig(image_size=16, stem_channels=4, stage_channels=(8,), blocks_per_stage=(1,),
                      head_hidden=(8, 4), porosity_hidden=(4,), porosity_embed_dim=4,
                      mbconv_expand=2, film_stages=(0,))
    tr, va = small_dataset.split("train"), small_dataset.split("val")
    tcfg = TrainConfig.for_phase(2, epochs=6, unfreeze_epochs=(2, 4), batch_size=8)
    out = tmp_path_factory.mktemp("p2")
    res = run_phase(tr, va, 2, tcfg, seed=1, model_cfg=cfg, out_dir=out)
    return res, out, tr, va, tcfg, cfg


def test_phase2_outputs(phase2_run):
    res, out, *_ = phase2_run
    assert (out / "log.jsonl").exists()
    assert [r["epoch"] for r in res.log][:2] == [0, 1]
    assert res.log[1]["trainable"] == ["head"]
    assert res.log[-1]["epoch"] <= 6
    for name in ("best", "ema"):
        assert (out / name / "manifest.json").exists()
    best, manifest = load_checkpoint(out / "best")
    assert manifest["step"] == res.best_epoch


def test_phase2_is_deterministic(phase2_run):
    res, _, tr, va, tcfg, cfg = phase2_run
    again = run_phase(tr, va, 2, tcfg, seed=1, model_cfg=cfg)
    assert again.model.params.blob() == res.model.params.blob()
    assert again.best_epoch == res.best_epoch


def test_frozen_groups_stay_fixed_during_head_only_epochs(phase2_run):
    _, _, tr, va, tcfg, cfg = phase2_run
    start = Model(cfg, seed=1, label_mean=tr.labels.mean(axis=0))
    res = run_phase(tr, va, 2, replace(tcfg, epochs=2, unfreeze_epochs=(5, 6)), seed=1,
                    model_cfg=cfg)
    names = [n for n in start.params.names() if not n.startswith("head.")]
    assert res.model.params.blob(names) == start.params.blob(names)
    assert res.model.params.blob(["head.out.w"]) != start.params.blob(["head.out.w"])


def test_phase4_freezes_backbone(phase2_run, tmp_path):
    _, out, tr, va, _, _ = phase2_run
    init, _ = load_checkpoint(out / "best")
    tcfg = TrainConfig.for_phase(4, epochs=3, batch_size=8, patience=10)
    res = run_phase(tr, va, 4, tcfg, seed=2, init_checkpoint=out / "best", out_dir=tmp_path)
    bb = init.params.backbone_names()
    final = res.model.params
    assert final.blob(bb) == init.params.blob(bb)
    for group in ("head", "film", "encoder"):
        names = final.names([group])
        assert final.blob(names) != init.params.blob(names)
    assert res.swa_models >= 1 and res.swa_state is not None
    best, _ = load_checkpoint(tmp_path / "best")
    assert best.params.blob(bb) == init.params.blob(bb)
    ema, _ = load_checkpoint(tmp_path / "ema")
    assert ema.params.blob(bb) == init.params.blob(bb)


def test_later_phase_needs_checkpoint(small_dataset):
    with pytest.raises(FileNotFoundError):
        run_phase(small_dataset, small_dataset, 3, TrainConfig.for_phase(3, epochs=2))
