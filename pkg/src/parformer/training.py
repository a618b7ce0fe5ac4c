"""Optimizer, learning-rate schedule, training loop, gradient check and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import ModelConfig, Params
from .data import Sample, augment, stack_batch
from .feature_processing import MaskPlan, macl_loss, sample_mask_plan
from .metrics import MetricsReport, evaluate_decisions
from .model import forward, init_centers, parameter_groups
from .numerics import ContractError, finite_difference_gradient, relative_error
from .recognition import LossConfig, asl_loss, predict, total_loss
from .viewpoint import has_positive_pair, mvcl_loss, viewpoint_ce_loss

CHECKPOINT_MAGIC = b"PARF1"
TRAIN_LOG_HEADER = ["epoch", "step", "lr", "total", "asl", "macl", "mvcl"]

# Test hook: when set, called on the analytic gradient dict inside gradcheck.
backward_fault: Callable[[dict[str, torch.Tensor]], None] | None = None


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    base_lr: float = 1e-4
    min_lr: float = 5e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_cycles: int = 1
    mask_ratio: float = 0.3
    pad_fraction: float = 0.125
    flip_prob: float = 0.5
    train_fraction: float = 0.8
    threshold: float = 0.5
    seed: int = 0
    reinit_centers_per_batch: bool = False


@dataclass
class OptimizerState:
    first_moment: dict[str, torch.Tensor]
    second_moment: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros_like(cls, params: Params, **hyper) -> "OptimizerState":
        return cls(
            {k: torch.zeros_like(v) for k, v in params.items()},
            {k: torch.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


@dataclass
class TrainRecord:
    epoch: int
    step: int
    lr: float
    total: float
    asl: float
    macl: float
    mvcl: float
    wall_time: float = 0.0
    degenerate_mvcl: bool = False


@dataclass
class TrainResult:
    params: Params
    records: list[TrainRecord]
    epoch_reports: list[MetricsReport] = field(default_factory=list)
    degenerate_batches: int = 0


def cosine_lr(epoch: float, total_epochs: float, base_lr: float = 1e-4, min_lr: float = 5e-6, cycles: int = 1) -> float:
    """Cosine decay from ``base_lr`` to ``min_lr``.

    With ``cycles > 1`` the schedule restarts at the start of each cycle and
    the restart peak halves every cycle; every cycle still ends at ``min_lr``.
    """
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    if cycles < 1:
        raise ContractError("cycles must be >= 1")
    length = total_epochs / cycles
    c = min(int(epoch // length), cycles - 1)
    t = epoch - c * length
    peak = base_lr / 2 ** c
    w = (1.0 + math.cos(math.pi * t / length)) / 2.0
    # convex combination is exact at w == 1 and w == 0
    return peak * w + min_lr * (1.0 - w)


def optimizer_step(params: Params, grads: dict[str, torch.Tensor], state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.first_moment[name]
            v = state.second_moment[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / c1) / ((v / c2).sqrt() + state.eps) + state.weight_decay * p
            p.sub_(lr * update)


def compute_losses(
    params: Params,
    images: torch.Tensor,
    attrs: torch.Tensor,
    views: torch.Tensor,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    plan: MaskPlan | None = None,
) -> dict[str, torch.Tensor]:
    """Forward pass plus every loss term. Loss arithmetic runs in float64."""
    out = forward(params, images, model_cfg, plan)
    pooled = out.pooled.double()
    p = torch.sigmoid(out.logits.double())
    asl = asl_loss(p, attrs, loss_cfg)
    if loss_cfg.lambda1 > 0:
        macl = macl_loss(pooled, attrs, params["centers"].double())
    else:
        macl = pooled.new_zeros(())
    degenerate = not has_positive_pair(views)
    if loss_cfg.lambda2 > 0 and not degenerate:
        mvcl = mvcl_loss(out.reps.double(), views, loss_cfg.temperature, loss_cfg.first_positive_only)
    else:
        mvcl = pooled.new_zeros(())
    total = total_loss(asl, macl, mvcl, loss_cfg)
    if loss_cfg.viewpoint_ce_weight > 0:
        total = total + loss_cfg.viewpoint_ce_weight * viewpoint_ce_loss(out.view_logits.double(), views)
    return {"total": total, "asl": asl, "macl": macl, "mvcl": mvcl,
            "degenerate": torch.tensor(degenerate), "logits": out.logits}


def _to_torch(images: np.ndarray, attrs: np.ndarray, views: np.ndarray, dtype):
    return (torch.from_numpy(np.ascontiguousarray(images)).to(dtype),
            torch.from_numpy(attrs), torch.from_numpy(views))


def _param_dtype(params: Params):
    return next(iter(params.values())).dtype


def predict_samples(params: Params, samples: Sequence[Sample], model_cfg: ModelConfig, batch_size: int = 64):
    """Attribute logits for ``samples``; no mask, no augmentation."""
    dtype = _param_dtype(params)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            images, _, _ = stack_batch(samples[i:i + batch_size])
            x = torch.from_numpy(images).to(dtype)
            chunks.append(forward(params, x, model_cfg).logits)
    return torch.cat(chunks)


def evaluate(params: Params, samples: Sequence[Sample], model_cfg: ModelConfig, threshold: float = 0.5) -> MetricsReport:
    logits = predict_samples(params, samples, model_cfg)
    decisions = predict(logits, threshold).decisions
    y = np.stack([s.attrs for s in samples])
    return evaluate_decisions(decisions.numpy(), y)


def train(
    params: Params,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample] | None,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run the full optimization; ``params`` is updated in place and returned.

    Random draw order per epoch: one permutation of the training set, then per
    step one mask plan (when the mask ratio is positive) and, when centers are
    re-drawn, one center matrix.  Augmentation uses a per-sample generator
    seeded by ``(seed, epoch, sample position)``.
    """
    loss_cfg.validate()
    rng = np.random.default_rng(train_cfg.seed)
    dtype = _param_dtype(params)
    for v in params.values():
        v.requires_grad_(True)
    state = OptimizerState.zeros_like(
        params, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )
    n = len(train_samples)
    bs = train_cfg.batch_size
    steps_per_epoch = n // bs + (1 if n % bs >= 2 else 0)
    if steps_per_epoch == 0:
        raise ContractError(f"{n} training samples cannot form a batch of at least 2")
    total_steps = steps_per_epoch * train_cfg.epochs
    final_h, final_w = model_cfg.stage_grid(3)
    order_index = {s.id: i for i, s in enumerate(train_samples)}
    result = TrainResult(params, [])
    start = time.perf_counter()
    global_step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            batch = [train_samples[i] for i in order[step * bs:(step + 1) * bs]]
            plan = None
            if train_cfg.mask_ratio > 0:
                plan = sample_mask_plan(final_h, final_w, train_cfg.mask_ratio, rng)
            if train_cfg.reinit_centers_per_batch:
                with torch.no_grad():
                    params["centers"].copy_(init_centers(*params["centers"].shape, rng))
            images = np.stack([
                augment(s.image, np.random.default_rng([train_cfg.seed, epoch, order_index[s.id]]),
                        train_cfg.pad_fraction, train_cfg.flip_prob)
                for s in batch
            ])
            _, attrs, views = stack_batch(batch)
            x, y, v = _to_torch(images, attrs, views, dtype)
            losses = compute_losses(params, x, y, v, model_cfg, loss_cfg, plan)
            names = list(params)
            grads = torch.autograd.grad(losses["total"], [params[k] for k in names], allow_unused=True)
            grads = {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(names, grads)}
            progress = train_cfg.epochs * global_step / max(total_steps - 1, 1)
            lr = cosine_lr(progress, train_cfg.epochs, train_cfg.base_lr, train_cfg.min_lr, train_cfg.lr_cycles)
            optimizer_step(params, grads, state, lr)
            degenerate = bool(losses["degenerate"]) and loss_cfg.lambda2 > 0
            result.degenerate_batches += degenerate
            asl, macl, mvcl = (float(losses[k].detach()) for k in ("asl", "macl", "mvcl"))
            result.records.append(TrainRecord(
                epoch, global_step, lr, asl + loss_cfg.lambda1 * macl + loss_cfg.lambda2 * mvcl,
                asl, macl, mvcl, time.perf_counter() - start, degenerate,
            ))
            global_step += 1
        if eval_samples:
            report = evaluate(params, eval_samples, model_cfg, train_cfg.threshold)
            result.epoch_reports.append(report)
            if log:
                mean_total = np.mean([r.total for r in result.records[-steps_per_epoch:]])
                log(f"epoch {epoch + 1}/{train_cfg.epochs} loss {mean_total:.4f} mA {report.mA:.4f}")
    for v in params.values():
        v.requires_grad_(False)
    return result


def write_train_csv(records: Sequence[TrainRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_HEADER)
        for r in records:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.total), repr(r.asl), repr(r.macl), repr(r.mvcl)])


# -- gradient check -------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    coords_checked: dict[str, int]

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    def lines(self) -> list[str]:
        out = [f"{'PASS' if e <= self.tolerance else 'FAIL'} {g} max_rel_err={e:.3e} coords={self.coords_checked[g]}"
               for g, e in self.max_rel_error.items()]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall tolerance={self.tolerance:g}")
        return out


def gradcheck(
    params: Params,
    images: torch.Tensor,
    attrs: torch.Tensor,
    views: torch.Tensor,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    plan: MaskPlan | None = None,
    rng: np.random.Generator | None = None,
    coords_per_group: int = 20,
    h_scale: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare autograd against central differences for every parameter group (float64).

    Relative error is ``|a - n| / max(|a|, |n|, floor)``: gradients smaller
    than ``floor`` are compared in absolute terms, since central differences
    of an O(10) loss cannot resolve them to 1e-4 relative accuracy.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    p64 = {k: v.detach().to(torch.float64).clone().requires_grad_(True) for k, v in params.items()}
    x = images.to(torch.float64)
    names = list(p64)
    total = compute_losses(p64, x, attrs, views, model_cfg, loss_cfg, plan)["total"]
    raw = torch.autograd.grad(total, [p64[k] for k in names], allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(p64[k])).detach() for k, g in zip(names, raw)}
    if backward_fault is not None:
        backward_fault(analytic)
    frozen = {k: v.detach() for k, v in p64.items()}

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for group, members in parameter_groups(frozen).items():
        sizes = np.array([frozen[k].numel() for k in members])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        k = min(coords_per_group, int(offsets[-1]))
        picks = np.sort(rng.choice(int(offsets[-1]), size=k, replace=False))
        worst = 0.0
        for mi, name in enumerate(members):
            local = picks[(picks >= offsets[mi]) & (picks < offsets[mi + 1])] - offsets[mi]
            if local.size == 0:
                continue

            def f(t, name=name):
                trial = dict(frozen)
                trial[name] = t
                return compute_losses(trial, x, attrs, views, model_cfg, loss_cfg, plan)["total"]

            numeric = finite_difference_gradient(f, frozen[name], h_scale, indices=local).view(-1)[local]
            a = analytic[name].reshape(-1)[torch.from_numpy(local)]
            worst = max(worst, float(relative_error(a, numeric, floor).max()))
        errors[group] = worst
        counts[group] = k
    return GradcheckReport(errors, tolerance, counts)


# -- checkpoints ------------------------------------------------------------------------------

def write_checkpoint(path: str | Path, params: Params, config: dict) -> None:
    """``PARF1`` | u32 LE header length | JSON header | float32 LE payloads in header order."""
    entries = [{"name": k, "shape": list(v.shape), "dtype": "f32"} for k, v in params.items()]
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(v.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, Params]:
    blob = Path(path).read_bytes()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}")
    if len(blob) < 9:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9:9 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    pos = 9 + hlen
    params: Params = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        params[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return header["config"], params
