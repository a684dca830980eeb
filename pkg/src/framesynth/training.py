"""Training harness: squared-error objective, Adam with exponential
learning-rate decay, a deterministic single-sequence-per-step loop with
checkpoint/resume, and finite-difference gradient checking over the whole
model.

Determinism: the sequence drawn at step k depends only on (seed, k), the
parameter init only on the seed, so a run is reproducible bit for bit and a
resumed run continues exactly where an uninterrupted one would be.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine, metrics
from .engine import Tensor
from .model import (ModelConfig, ParameterStore, SynthesisRequest,
                    build_parameters, forward, forward_training,
                    request_from_sequence, save_checkpoint)
from .synthdata import FrameSequence


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Optional[str]):
        super().__init__(
            f"non-finite loss at step {step}; last checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


class GradcheckFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objective

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of squared differences."""
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = engine.sub(pred, target)
    return engine.mean_all(engine.mul(diff, diff))


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over frames of the per-frame L2 norm (unsquared variant)."""
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = engine.sub(pred, target)
    norms = engine.sqrt(engine.sum_per_frame(engine.mul(diff, diff)))
    return engine.mean_all(norms)


_LOSSES = {"mse": mse_loss, "l2": l2_loss}


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    decay_rate: float = 0.95
    decay_every: int = 20000
    stepwise_decay: bool = False  # continuous exponent by default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, opt: OptimConfig) -> float:
    """base_lr * decay_rate^(step / decay_every); stepwise variant floors
    the exponent."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    exponent = step // opt.decay_every if opt.stepwise_decay else step / opt.decay_every
    return opt.base_lr * opt.decay_rate ** exponent


class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    def __init__(self, store: ParameterStore, opt: OptimConfig):
        self.opt = opt
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}


def adam_step(store: ParameterStore, state: AdamState) -> float:
    """One standard Adam update with bias correction at the scheduled
    learning rate. Returns the rate used."""
    opt = state.opt
    lr = lr_at(state.step, opt)
    state.step += 1
    t = state.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + opt.eps)
        p.data = p.data - update
    return lr


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainSettings:
    steps: int
    seed: int = 0
    mode: str = "extrapolate"
    target_count: int = 1
    loss: str = "mse"
    batch: int = 1  # sequences accumulated per optimizer step
    dtype: str = "float32"
    optim: OptimConfig = field(default_factory=OptimConfig)
    checkpoint_every: int = 0  # 0: final only
    metrics_every: int = 0  # 0: no validation passes

    def __post_init__(self):
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {sorted(_LOSSES)}, got {self.loss!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val_records: list = field(default_factory=list)  # (step, psnr, ssim)
    step_seconds: list = field(default_factory=list)
    final_checkpoint: Optional[str] = None
    resume_state: Optional[str] = None

    def write(self, path) -> None:
        """Line-delimited records: step, loss, lr, optionally psnr/ssim."""
        val_by_step = {s: (p, m) for s, p, m in self.val_records}
        with open(path, "w") as fh:
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                line = f"{i} {loss!r} {lr!r}"
                if i in val_by_step:
                    p, m = val_by_step[i]
                    line += f" {p!r} {m!r}"
                fh.write(line + "\n")


def _draw_indices(seed: int, step: int, count: int, n: int) -> list:
    rng = np.random.default_rng((seed, step))
    return [int(i) for i in rng.integers(0, n, size=count)]


def _sequence_to_request(seq: FrameSequence, settings: TrainSettings):
    return request_from_sequence(seq, settings.mode,
                                 settings.target_count if settings.mode == "extrapolate" else None)


def evaluate(dataset: Sequence[FrameSequence], store: ParameterStore,
             config: ModelConfig, settings: TrainSettings):
    """Mean PSNR/SSIM of clamped predictions against ground truth."""
    psnrs, ssims = [], []
    for seq in dataset:
        req, targets, _ = _sequence_to_request(seq, settings)
        pred = forward(req, store, config)
        for q in range(targets.shape[0]):
            psnrs.append(metrics.psnr(pred.frames[q], targets[q]))
            ssims.append(metrics.ssim(pred.frames[q], targets[q]))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _save_state(path, store: ParameterStore, state: AdamState) -> None:
    arrays = {"step": np.array(state.step, dtype=np.int64)}
    for name, t in store.items():
        arrays["p/" + name] = t.data
        arrays["m/" + name] = state.m[name]
        arrays["v/" + name] = state.v[name]
    np.savez(path, **arrays)


def _load_state(path, store: ParameterStore, state: AdamState) -> int:
    with np.load(path) as blob:
        for name, t in store.items():
            t.data = blob["p/" + name].copy()
            state.m[name] = blob["m/" + name].copy()
            state.v[name] = blob["v/" + name].copy()
        state.step = int(blob["step"])
    return state.step


def train(config: ModelConfig, dataset: Sequence[FrameSequence],
          settings: TrainSettings, out_dir: Optional[str] = None,
          val_dataset: Optional[Sequence[FrameSequence]] = None,
          resume_state: Optional[str] = None) -> TrainReport:
    """Optimize the model on the dataset: one drawn sequence per step (or
    `batch` accumulated), checkpointing into out_dir. Deterministic for a
    fixed (config, dataset, settings)."""
    if not dataset:
        raise ValueError("dataset is empty")
    engine.set_default_dtype(np.float32 if settings.dtype == "float32" else np.float64)
    store = build_parameters(config, settings.seed)
    state = AdamState(store, settings.optim)
    start_step = 0
    if resume_state is not None:
        start_step = _load_state(resume_state, store, state)

    report = TrainReport()
    last_checkpoint = None

    def write_snapshot(tag: str):
        nonlocal last_checkpoint
        if out_dir is None:
            return None, None
        os.makedirs(out_dir, exist_ok=True)
        cpath = os.path.join(out_dir, f"checkpoint_{tag}.cvtx")
        spath = os.path.join(out_dir, f"state_{tag}.npz")
        save_checkpoint(cpath, store, config)
        _save_state(spath, store, state)
        last_checkpoint = cpath
        return cpath, spath

    if start_step == 0:
        write_snapshot("init")

    loss_fn = _LOSSES[settings.loss]
    for step in range(start_step, settings.steps):
        t0 = time.perf_counter()
        store.zero_grad()
        idxs = _draw_indices(settings.seed, step, settings.batch, len(dataset))
        total = 0.0
        for idx in idxs:
            req, targets, _ = _sequence_to_request(dataset[idx], settings)
            pred, _ = forward_training(req, store, config)
            loss = loss_fn(pred, engine.tensor(targets))
            if settings.batch > 1:
                loss = engine.scale(loss, 1.0 / settings.batch)
            loss.backward()
            total += loss.item()
        if not np.isfinite(total):
            write_snapshot("abort")
            raise TrainingDiverged(step, last_checkpoint)
        lr = adam_step(store, state)
        report.losses.append(total)
        report.lrs.append(lr)
        report.step_seconds.append(time.perf_counter() - t0)
        done = step + 1
        if settings.metrics_every and val_dataset and done % settings.metrics_every == 0:
            p, s = evaluate(val_dataset, store, config, settings)
            report.val_records.append((step, p, s))
        if settings.checkpoint_every and done % settings.checkpoint_every == 0 \
                and done < settings.steps:
            write_snapshot(f"{done:06d}")

    cpath, spath = write_snapshot("final")
    report.final_checkpoint = cpath
    report.resume_state = spath
    if out_dir is not None:
        report.write(os.path.join(out_dir, "train_report.txt"))
    return report


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_parameter: str
    coords_checked: int
    coords_skipped: int
    per_tensor: dict


def _gradcheck_loss(store: ParameterStore, config: ModelConfig,
                    frames4, frames6, targets4, targets6) -> Tensor:
    # both query-initialization paths contribute to one scalar
    req_e = SynthesisRequest(mode="extrapolate", frames=frames4,
                             positions=[1.0, 2.0, 3.0, 4.0], target_count=2)
    pred_e, _ = forward_training(req_e, store, config)
    loss_e = mse_loss(pred_e, engine.tensor(targets4))
    req_i = SynthesisRequest(mode="interpolate", frames=frames6,
                             positions=[1.0, 2.0, 3.0, 5.0, 6.0, 7.0], target_count=3)
    pred_i, _ = forward_training(req_i, store, config)
    loss_i = mse_loss(pred_i, engine.tensor(targets6))
    return engine.add(loss_e, loss_i)


def gradcheck(config: Optional[ModelConfig] = None, seed: int = 0,
              min_coords: int = 200, eps: float = 1e-5,
              fail_threshold: float = 1e-3) -> GradcheckResult:
    """Compare reverse-mode gradients of a full forward+loss (both query
    modes) against central finite differences on a random subsample of
    parameter coordinates covering every tensor. 64-bit only.

    A coordinate whose +-eps interval flips any rectifier branch is
    resampled: the loss is not differentiable there, so a central
    difference estimates nothing. Flip detection is exact (branch masks of
    the two evaluations are compared)."""
    config = config or ModelConfig.micro()
    engine.set_default_dtype(np.float64)
    store = build_parameters(config, seed)
    rng = np.random.default_rng((seed, 0xC0FFEE))
    h = w = 8
    frames4 = rng.uniform(0.0, 1.0, (4, 3, h, w))
    frames6 = rng.uniform(0.0, 1.0, (6, 3, h, w))
    targets4 = rng.uniform(0.0, 1.0, (2, 3, h, w))
    targets6 = rng.uniform(0.0, 1.0, (3, 3, h, w))

    store.zero_grad()
    loss = _gradcheck_loss(store, config, frames4, frames6, targets4, targets6)
    loss.backward()

    def loss_and_signs():
        signs = []
        engine._LEAKY_SIGN_HOOK = signs.append
        try:
            value = _gradcheck_loss(store, config, frames4, frames6,
                                    targets4, targets6).item()
        finally:
            engine._LEAKY_SIGN_HOOK = None
        return value, signs

    names = store.names()
    total = store.total_parameters()
    worst = 0.0
    worst_name = ""
    checked = 0
    skipped = 0
    per_tensor = {}
    offenders = []
    for name in names:
        t = store[name]
        quota = max(1, int(round(min_coords * t.numel() / total)))
        quota = min(quota, t.numel())
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        order = rng.permutation(t.numel())
        t_worst = 0.0
        done = 0
        for fi in order:
            if done >= quota:
                break
            orig = flat[fi]
            flat[fi] = orig + eps
            fp, signs_p = loss_and_signs()
            flat[fi] = orig - eps
            fm, signs_m = loss_and_signs()
            flat[fi] = orig
            if any(not np.array_equal(a, b) for a, b in zip(signs_p, signs_m)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * eps)
            analytic = gflat[fi]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            err = abs(analytic - numeric) / denom
            t_worst = max(t_worst, err)
            checked += 1
            done += 1
        if done == 0:
            raise GradcheckFailure(
                f"could not find a kink-free coordinate in {name!r}")
        per_tensor[name] = t_worst
        if t_worst > worst:
            worst, worst_name = t_worst, name
        if t_worst > fail_threshold:
            offenders.append((name, t_worst))
    if offenders:
        listing = ", ".join(f"{n} ({e:.3e})" for n, e in offenders)
        raise GradcheckFailure(
            f"gradient mismatch above {fail_threshold}: {listing}")
    return GradcheckResult(max_rel_error=worst, worst_parameter=worst_name,
                           coords_checked=checked, coords_skipped=skipped,
                           per_tensor=per_tensor)
