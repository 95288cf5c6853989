"""AdamW, learning-rate schedule, progressive unfreezing, weight averaging
and the per-phase training loop.

Phases: 2 trains the backbone and head with D4 augmentation; 3 continues
from the phase-2 best checkpoint with the full augmentation pipeline and
the off-diagonal loss term; 4 freezes the backbone and trains only the
head, the porosity encoder and the FiLM layers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augmentation import AugConfig, augment
from .dataset import Dataset
from .evaluation.metrics import component_r2, eps_sym, positivity_fraction
from .loss import LossWeights, loss_values, physics_loss
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import PermTensor

log = logging.getLogger(__name__)

FULL_EPOCHS = 600


@dataclass(frozen=True)
class TrainConfig:
    phase: int = 2
    epochs: int = 200
    warmup_epochs: int = 20
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 32
    patience: int = 100
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    swa_start_epoch: int | None = None
    swa_lr: float = 5e-5
    ema_decay: float = 0.99
    unfreeze_epochs: tuple = (17, 50)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "unfreeze_epochs", tuple(self.unfreeze_epochs))
        if self.phase not in (2, 3, 4):
            raise ValueError(f"phase must be 2, 3 or 4, got {self.phase}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup must be shorter than the run")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")

    @classmethod
    def for_phase(cls, phase: int, scale: str = "desk", **overrides) -> "TrainConfig":
        """Per-phase presets.  ``full`` gives the full-length schedule;
        ``desk`` shortens it to 200 epochs with the same proportions, except
        that early-stopping patience keeps its full length (a third of it
        stops the short runs before the cosine decay has settled)."""
        lr_min = {2: 1e-7, 3: 1e-5, 4: 1e-6}[phase]
        wd = {2: 0.05, 3: 0.01, 4: 0.01}[phase]
        patience = {2: 100, 3: 100, 4: 150}[phase]
        if scale == "full":
            base = cls(phase=phase, epochs=600, warmup_epochs=50, lr_max=1e-4, lr_min=lr_min,
                       weight_decay=wd, patience=patience,
                       swa_start_epoch=400 if phase == 4 else None, swa_lr=5e-6,
                       ema_decay=0.9999, unfreeze_epochs=(50, 150))
        elif scale == "desk":
            epochs = overrides.get("epochs", 200)
            f = epochs / FULL_EPOCHS
            # learning rates are ten times the full-scale ones: training starts
            # from random weights rather than a pretrained backbone
            base = cls(phase=phase, epochs=epochs, warmup_epochs=max(1, round(50 * f)),
                       lr_max=1e-3, lr_min=10 * lr_min, weight_decay=wd,
                       patience=patience,
                       swa_start_epoch=round(400 * f) if phase == 4 else None, swa_lr=5e-5,
                       ema_decay=0.99, unfreeze_epochs=(round(50 * f), round(150 * f)))
        else:
            raise ValueError(f"unknown scale {scale!r}")
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------- schedule / masks

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup ``lr_max * e / warmup`` up to ``warmup``, then cosine
    down to ``lr_min`` at ``epoch == cfg.epochs``.  From the SWA start
    epoch on, the constant ``swa_lr`` is used instead."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.swa_start_epoch is not None and epoch >= cfg.swa_start_epoch:
        return cfg.swa_lr
    if cfg.warmup_epochs > 0 and epoch <= cfg.warmup_epochs:
        return cfg.lr_max * epoch / cfg.warmup_epochs
    progress = min(1.0, (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs))
    if progress == 1.0:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def backbone_groups(groups) -> list[str]:
    return [g for g in groups if g == "stem" or g.startswith("stage")]


def unfreeze_mask(epoch: int, phase: int, groups, unfreeze_epochs=(17, 50)) -> set[str]:
    """Trainable parameter groups.

    Phase 2: head only, then head plus the last two stages, then the whole
    backbone and head (the conditioning layers stay at their identity
    initialisation).  Phase 3: backbone and head.  Phase 4: head, FiLM and
    porosity encoder; the backbone stays frozen.
    """
    groups = list(groups)
    stages = sorted((g for g in groups if g.startswith("stage")), key=lambda s: int(s[5:]))
    backbone = set(backbone_groups(groups))
    if phase == 2:
        if epoch < unfreeze_epochs[0]:
            return {"head"}
        if epoch < unfreeze_epochs[1]:
            return {"head", *stages[-2:]}
        return {"head"} | backbone
    if phase == 3:
        return {"head"} | backbone
    if phase == 4:
        return {"head"} | ({"film", "encoder"} & set(groups))
    raise ValueError(f"unknown phase {phase}")


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)


def adamw_step(params, lr: float, cfg: TrainConfig, state: AdamState) -> None:
    """One AdamW update of every non-frozen parameter (in place).

    Weight decay is decoupled: ``theta *= 1 - lr * wd`` before the Adam
    step.  Each parameter keeps its own step count, so groups unfrozen
    late start with fresh bias correction.
    """
    b1, b2 = cfg.betas
    for name in params.trainable():
        t = params[name]
        if t.grad is None:
            raise ValueError(f"trainable parameter {name} has no gradient")
        g = t.grad
        n = state.steps.get(name, 0) + 1
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name], state.steps[name] = m, v, n
        mhat = m / (1 - b1**n)
        vhat = v / (1 - b2**n)
        if cfg.weight_decay:
            t.data *= 1.0 - lr * cfg.weight_decay
        t.data -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


# ---------------------------------------------------------------- averaging

@dataclass
class AveragedState:
    swa: dict | None = None
    n_models: int = 0
    ema: dict | None = None


def swa_update(state: AveragedState, current: dict) -> AveragedState:
    """Running arithmetic mean; identical snapshots leave it unchanged exactly."""
    if state.n_models == 0 or state.swa is None:
        state.swa = {k: v.copy() for k, v in current.items()}
    else:
        n = state.n_models
        for k, v in current.items():
            state.swa[k] += (v - state.swa[k]) / (n + 1)
    state.n_models += 1
    return state


def _lerp(start, end, weight):
    # the two-sided form is exact at both ends (weight 0 and 1) and when start == end
    if weight < 0.5:
        return start + weight * (end - start)
    return end - (end - start) * (1.0 - weight)


def ema_update(state: AveragedState, current: dict, decay: float, names=None) -> AveragedState:
    """``ema <- decay * ema + (1 - decay) * theta`` for ``names`` (default all)."""
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    if state.ema is None:
        state.ema = {k: v.copy() for k, v in current.items()}
        return state
    for k in (current if names is None else names):
        state.ema[k] = _lerp(state.ema[k], current[k], 1.0 - decay)
    return state


def normalization_recalibration(model, images=None, porosity=None):
    """Refresh accumulated normalisation statistics after weight averaging.

    Models built here use layer normalisation only, so there is nothing to
    refresh and the parameters are left untouched.  A model exposing
    ``refresh_normalization_statistics`` gets one pass over the data.
    """
    if model.has_normalization_statistics():
        model.refresh_normalization_statistics(images, porosity)
    return model


# ---------------------------------------------------------------- phase loop

@dataclass
class PhaseResult:
    model: Model
    best_state: dict
    best_metric: float
    best_epoch: int
    ema_state: dict
    swa_state: dict | None
    swa_models: int
    log: list
    checkpoints: dict = field(default_factory=dict)


def aug_for_phase(phase: int) -> AugConfig:
    return AugConfig.d4_only() if phase == 2 else AugConfig()


def validation_metrics(model: Model, ds: Dataset) -> dict:
    pred = model.predict(ds.images, ds.porosity)
    comp = component_r2(pred, ds.labels)
    return {"val_r2": float(comp.mean()), "val_r2_diag": float(comp[[0, 3]].mean()),
            "val_r2_offdiag": float(comp[[1, 2]].mean()),
            "val_eps_sym": float(eps_sym(pred).mean()),
            "val_positivity": positivity_fraction(pred)}


def _batch(ds: Dataset, idx, aug: AugConfig, seeds) -> tuple[np.ndarray, np.ndarray]:
    imgs, labels = [], []
    for i, s in zip(idx, seeds):
        k = PermTensor.from_vector(ds.labels[i])
        rec = augment(ds.images[i], k, aug, int(s))
        imgs.append(rec.image)
        labels.append(rec.k.as_vector())
    return np.stack(imgs), np.array(labels)


def run_phase(train: Dataset, val: Dataset, phase: int, cfg: TrainConfig | None = None,
              seed: int = 0, model: Model | None = None, init_checkpoint=None,
              model_cfg: ModelConfig | None = None, aug: AugConfig | None = None,
              weights: LossWeights | None = None, out_dir=None,
              keep_snapshots: bool = False) -> PhaseResult:
    """Train one phase with early stopping on component-averaged validation R^2.

    Phase 2 builds a fresh model (output bias = mean training label) unless
    one is passed in.  Phases 3 and 4 start from ``init_checkpoint`` (the
    previous phase's best) or from an explicitly passed ``model``.  The
    untrained starting point is evaluated as epoch 0 and is itself a
    candidate for the best checkpoint.
    """
    cfg = cfg or TrainConfig.for_phase(phase)
    if cfg.phase != phase:
        cfg = replace(cfg, phase=phase)
    aug = aug if aug is not None else aug_for_phase(phase)
    weights = weights or LossWeights.for_phase(phase)
    if model is None:
        if phase == 2 and init_checkpoint is None:
            model = Model(model_cfg, seed=seed, label_mean=train.labels.mean(axis=0))
        elif init_checkpoint is None:
            raise FileNotFoundError(f"phase {phase} needs the previous phase's best checkpoint")
        else:
            model, _ = load_checkpoint(init_checkpoint)
    params = model.params
    groups = params.group_set()
    opt = AdamState()
    avg = AveragedState()
    avg = ema_update(avg, params.state(), cfg.ema_decay)
    snapshots = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "w")
    logs = []

    def emit(rec):
        logs.append(rec)
        if out is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    metrics = validation_metrics(model, val)
    best_metric, best_epoch, best_state = metrics["val_r2"], 0, params.state()
    emit({"epoch": 0, "lr": 0.0, **metrics})
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            trainable = unfreeze_mask(epoch, phase, groups, cfg.unfreeze_epochs)
            params.set_trainable_groups(trainable)
            for name, t in params.tensors.items():
                t.requires_grad = name not in params.frozen
            lr = lr_at(epoch, cfg)
            rng = np.random.default_rng([seed, phase, epoch])
            order = rng.permutation(len(train))
            aug_seeds = rng.integers(0, 2**62, size=len(train))
            sums, n_batches = {}, 0
            for b0 in range(0, len(train), cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                images, labels = _batch(train, idx, aug, aug_seeds[b0:b0 + len(idx)])
                phi = train.porosity[idx]
                params.zero_grad()
                pred = model.forward(images, phi, train=True, seed=(seed, phase, epoch, b0))
                terms = physics_loss(pred, labels, weights)
                ad.backward(terms["total"])
                adamw_step(params, lr, cfg, opt)
                step += 1
                avg = ema_update(avg, {n: params[n].data for n in params.trainable()},
                                 cfg.ema_decay)
                for k, v in loss_values(terms).items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            if cfg.swa_start_epoch is not None and epoch >= cfg.swa_start_epoch:
                current = params.state()
                avg = swa_update(avg, current)
                if keep_snapshots:
                    snapshots.append(current)
            metrics = validation_metrics(model, val)
            rec = {"epoch": epoch, "lr": lr, "step": step, "trainable": sorted(trainable),
                   **{f"loss_{k}": v / n_batches for k, v in sums.items()}, **metrics}
            improved = metrics["val_r2"] > best_metric
            if improved:
                best_metric, best_epoch, best_state = metrics["val_r2"], epoch, params.state()
            rec["best_epoch"] = best_epoch
            emit(rec)
            log.info("phase %d epoch %d lr %.3g loss %.4g val_r2 %.4f", phase, epoch, lr,
                     rec["loss_total"], metrics["val_r2"])
            if epoch - best_epoch >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    finally:
        for t in params.tensors.values():
            t.requires_grad = True
        if out is not None:
            log_fh.close()

    result = PhaseResult(model, best_state, best_metric, best_epoch, avg.ema,
                         avg.swa, avg.n_models, logs)
    if keep_snapshots:
        result.checkpoints["snapshots"] = snapshots
    if out is not None:
        _write_checkpoints(result, out, phase, cfg, seed)
    return result


def model_with_state(template: Model, state: dict) -> Model:
    m = Model(template.cfg)
    m.params.load_state(state)
    return m


def _write_checkpoints(result: PhaseResult, out: Path, phase: int, cfg: TrainConfig, seed: int):
    meta = {"phase": phase, "seed": seed, "train_config": cfg.to_dict()}
    best = model_with_state(result.model, result.best_state)
    result.checkpoints["best"] = save_checkpoint(
        best, out / "best", step=result.best_epoch, metric=result.best_metric,
        metric_name="val_r2", **meta)
    ema = model_with_state(result.model, result.ema_state)
    result.checkpoints["ema"] = save_checkpoint(ema, out / "ema", kind="ema", **meta)
    if result.swa_state is not None:
        swa = normalization_recalibration(model_with_state(result.model, result.swa_state))
        result.checkpoints["swa"] = save_checkpoint(swa, out / "swa", kind="swa",
                                                    n_models=result.swa_models, **meta)
