"""Autoregressive training loop: Adam, global-norm clipping, carry threading,
spike detection and overflow guarding.

The loop is deliberately boring; the one non-standard ingredient is the carry
policy, which decides whether each batch starts from zeros or from the final
hidden states of the previous contiguous batch (gradient-stopped at the
boundary).
"""

from __future__ import annotations

import json
import statistics
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import carry as carrymod
from . import ndcore as nd
from . import models as modelsmod
from . import stability as stabmod
from .ndcore import Tape, Tensor


@dataclass
class TrainConfig:
    T: int = 32
    B: int = 16
    steps: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    carry_kind: str = "previous"   # zero | previous
    carry_detach: bool = True
    batcher_mode: str = "contiguous"
    precision: str = "float64"
    eval_cadence: int = 0          # 0 disables periodic validation
    ckpt_cadence: int = 0          # 0 means final checkpoint only
    val_fraction: float = 0.0
    spike_factor: float = 3.0
    spike_window: int = 100
    halt_on_overflow: bool = False
    # decay parameters train slowly so the spectrum set at initialization
    # survives; large moves here change the model's memory horizon wholesale
    decay_lr_mult: float = 0.1

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("training sequence length must be >= 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def policy(self) -> carrymod.CarryPolicy:
        return carrymod.CarryPolicy(self.carry_kind, self.carry_detach)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL in nats of ``targets`` under ``logits`` (B, T, V)."""
    V = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError(f"targets out of range [0, {V})")
    logp = nd.log_softmax(logits, axis=-1)
    picked = nd.take_along(logp, targets, axis=-1)
    return -picked.mean()


def perplexity(nll: float) -> float:
    return float(np.exp(nll))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_grad_norm(params: dict[str, Tensor]) -> float:
    """L2 norm over all gradients, accumulated in float64."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig,
              grad_scale: float = 1.0) -> dict[str, Tensor]:
    """One Adam update; returns a fresh params dict (tensors are immutable)."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = {}
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if grad_scale != 1.0:
            g = g * grad_scale
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
            state.m[name] = m
            state.v[name] = v
        # moments updated in place: the state owns these buffers
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = cfg.lr * (cfg.decay_lr_mult if "log_neg_decay" in name else 1.0)
        denom = np.sqrt(v / bc2)
        denom += cfg.eps
        new = t.data - lr / bc1 * m / denom
        if cfg.weight_decay:
            new -= lr * cfg.weight_decay * t.data
        out[name] = Tensor(new, requires_grad=True)
    return out


class SpikeDetector:
    """Flags a step whose loss exceeds ``factor`` times the trailing median."""

    def __init__(self, factor: float, window: int):
        self.factor = factor
        self.window = window
        self.history: list[float] = []

    def check(self, loss: float) -> bool:
        spiked = False
        if len(self.history) >= 10 and np.isfinite(loss):
            med = statistics.median(self.history[-self.window:])
            spiked = loss > self.factor * med
        if np.isfinite(loss):
            self.history.append(loss)
        return spiked


def model_lambda_max(model: modelsmod.LanguageModel, layer: int) -> float:
    key = f"blocks.{layer}.ssm.log_neg_decay"
    if key in model.params:
        return float(np.exp(-np.exp(model.params[key].data)).max())
    return float("nan")


@dataclass
class RunResult:
    model: modelsmod.LanguageModel
    records: list[dict]
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def train_run(model: modelsmod.LanguageModel, cfg: TrainConfig, corpus,
              out_dir=None, monitor: stabmod.OverflowMonitor | None = None,
              provenance: dict | None = None, log_every: int = 1) -> RunResult:
    """Train ``model`` on a byte corpus; returns the metrics record list.

    Records go to ``out_dir/metrics.jsonl`` when a directory is given, one
    JSON object per line: step records carry {step, loss, lr, grad_norm,
    overflow_flag, spike_flag}; overflow and validation events are interleaved
    into the same stream.
    """
    nd.set_dtype(cfg.precision)
    tokens = carrymod.load_corpus(corpus)
    n_val = int(len(tokens) * cfg.val_fraction)
    val_tokens = tokens[len(tokens) - n_val:] if n_val else None
    train_tokens = tokens[: len(tokens) - n_val] if n_val else tokens

    policy = cfg.policy()
    if policy.kind == "previous" and not policy.detach:
        raise ValueError(
            "training with an attached carry would backpropagate through "
            "unbounded history; use detach=True (attached carry exists for "
            "forward-equivalence checks only)")
    if policy.kind == "previous" and cfg.batcher_mode == "shuffled":
        warnings.warn(
            "PREVIOUS-INIT CARRY WITH A SHUFFLED BATCHER: hidden states will be "
            "carried between unrelated chunks; this configuration is almost "
            "certainly not what you want.", stacklevel=2)

    batcher = carrymod.StreamBatcher(train_tokens, cfg.B, cfg.T,
                                     mode=cfg.batcher_mode, seed=cfg.seed)
    adam = AdamState()
    spikes = SpikeDetector(cfg.spike_factor, cfg.spike_window)
    records: list[dict] = []
    metrics_path = None
    ckpt_path = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        ckpt_path = out / "checkpoint.bin"

    header = {"type": "run_header", "precision": cfg.precision, "seed": cfg.seed}
    if provenance:
        header.update(provenance)
    records.append(header)

    model.train_T = cfg.T
    state_carry: carrymod.CarryState | None = None

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for step in range(cfg.steps):
            batch = batcher.next_batch()
            h0 = carrymod.init_hidden(policy, state_carry if policy.kind == "previous" else None,
                                      batch, model.state_shapes(cfg.B))
            overflow_flag = False
            loss_val = float("nan")
            grad_norm = 0.0
            try:
                model.zero_grad()
                with Tape() as tape:
                    logits, finals, stats = model.forward(
                        batch.inputs, h0, collect_state_stats=True)
                    loss = cross_entropy(logits, batch.targets)
                loss_val = float(loss.data)
                if monitor is not None:
                    for li, mx in enumerate(stats):
                        ev = monitor.observe(step, li, mx, model_lambda_max(model, li))
                        if ev is not None:
                            records.append(ev.to_record())
                tape.backward(loss)
                grad_norm = global_grad_norm(model.params)
                if not np.isfinite(loss_val) or not np.isfinite(grad_norm):
                    overflow_flag = True
                else:
                    scale = 1.0
                    if cfg.clip_norm and grad_norm > cfg.clip_norm:
                        scale = cfg.clip_norm / grad_norm
                    model.params = adam_step(model.params, adam, cfg, grad_scale=scale)
                if policy.kind == "previous":
                    state_carry, carried_overflow = carrymod.capture_carry(
                        finals, batch, detach=policy.detach)
                    if carried_overflow:
                        overflow_flag = True
                        records.append({"event": "overflow", "kind": "carry_reset",
                                        "step": step, "layer": -1,
                                        "max_abs_h": float("inf"),
                                        "lambda_max": model_lambda_max(model, 0)})
            except nd.OverflowDetected as exc:
                if cfg.halt_on_overflow:
                    raise nd.OverflowDetected(
                        f"overflow at training step {step}: {exc}", step=step,
                        **exc.context) from exc
                overflow_flag = True
                if monitor is not None:
                    layer = exc.context.get("layer", -1)
                    ev = monitor.observe(step, layer, float("inf"),
                                         model_lambda_max(model, max(layer, 0)))
                    if ev is not None:
                        records.append(ev.to_record())
                state_carry = None  # reset after a blown forward

            spike_flag = spikes.check(loss_val)
            if spike_flag:
                records.append({"event": "spike", "step": step, "loss": loss_val})
            if step % log_every == 0 or step == cfg.steps - 1 or overflow_flag or spike_flag:
                records.append({
                    "step": step, "loss": loss_val, "lr": cfg.lr,
                    "grad_norm": grad_norm, "overflow_flag": overflow_flag,
                    "spike_flag": spike_flag,
                })
            if cfg.eval_cadence and val_tokens is not None and (step + 1) % cfg.eval_cadence == 0:
                records.append({"event": "val", "step": step,
                                "val_nll": validation_nll(model, val_tokens, cfg.T)})
            if out is not None and cfg.ckpt_cadence and (step + 1) % cfg.ckpt_cadence == 0:
                modelsmod.save_checkpoint(out / f"checkpoint_step{step + 1}.bin",
                                          model, extra=provenance)

    if ckpt_path is not None:
        modelsmod.save_checkpoint(ckpt_path, model, extra=provenance)
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return RunResult(model, records, ckpt_path, metrics_path)


def validation_nll(model: modelsmod.LanguageModel, val_tokens: np.ndarray,
                   T: int, max_windows: int = 16) -> float:
    """Mean NLL over zero-initialized windows of the validation slice."""
    n_win = min((len(val_tokens) - 1) // T, max_windows)
    if n_win < 1:
        return float("nan")
    inputs = np.stack([val_tokens[i * T:(i + 1) * T] for i in range(n_win)])
    targets = np.stack([val_tokens[i * T + 1:(i + 1) * T + 1] for i in range(n_win)])
    logits, _, _ = model.forward(inputs)
    return float(cross_entropy(logits, targets).data)
