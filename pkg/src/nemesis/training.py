"""Pretraining loop: superpatch sampling, noise, masking, masked MSE, AdamW."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndnum as nd
from .errors import ConfigError, NemesisError, NumericError, ParameterError
from .model.masking import gen_mask
from .model.network import ModelParams, reconstruction_loss
from .superpatch import SuperpatchGrid, patchify, sample_superpatch
from .volume import Volume, corrupt_gaussian


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 1
    lr: float = 1e-3
    warmup: int = 50
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    noise_sigma: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 0
    probe_interval: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup <= max(self.steps, 0):
            raise ConfigError(f"warmup must lie in [0, steps], got {self.warmup}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.noise_sigma < 0 or self.weight_decay < 0:
            raise ConfigError("noise_sigma and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("betas must lie in [0, 1) and eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr``, then cosine decay reaching 0 at ``steps``."""
    if not 0 <= step <= tc.steps:
        raise ParameterError(f"step {step} outside [0, {tc.steps}]")
    if step < tc.warmup:
        return tc.lr * step / tc.warmup
    span = tc.steps - tc.warmup
    if span == 0:
        return tc.lr if step < tc.steps else 0.0
    return tc.lr * 0.5 * (1.0 + math.cos(math.pi * (step - tc.warmup) / span))


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, t: int, arrays: dict) -> "AdamState":
        m = {k[len("opt.m."):]: np.array(a) for k, a in arrays.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: np.array(a) for k, a in arrays.items() if k.startswith("opt.v.")}
        return cls(t, m, v)


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to matrices and tables, not to vectors (biases, norms, gate)."""
    return arr.ndim >= 2


def optimizer_step(params: ModelParams, grads: dict, state: AdamState, tc: TrainConfig,
                   lr: float | None = None) -> tuple[ModelParams, AdamState]:
    """One AdamW update with bias correction; returns new params and state."""
    lr = tc.lr if lr is None else lr
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    t = state.t + 1
    c1 = 1.0 - tc.beta1 ** t
    c2 = 1.0 - tc.beta2 ** t
    new_m, new_v, arrays = {}, {}, {}
    for name, tensor in params.tensors.items():
        p = tensor.data.astype(np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ParameterError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = tc.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - tc.beta1) * g
        v = tc.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - tc.beta2) * g * g
        if tc.weight_decay and decays(name, p):
            p = p * (1.0 - lr * tc.weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + tc.eps)
        new_m[name], new_v[name], arrays[name] = m, v, p
    return params.with_arrays(arrays), AdamState(t, new_m, new_v)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    probe: list = field(default_factory=list)
    state: AdamState | None = None

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


def write_train_log(log: TrainLog, path, with_time: bool = False) -> None:
    """CSV of (step, loss, lr[, seconds]); the time column is opt-in to keep runs byte-stable."""
    cols = ["step", "loss", "lr"] + (["seconds"] if with_time else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in log.records:
            w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"]))]
                       + ([f"{r['seconds']:.6f}"] if with_time else []))


def _check_corpus(volumes, side: int) -> None:
    if not volumes:
        raise ConfigError("training corpus is empty")
    for i, v in enumerate(volumes):
        try:
            SuperpatchGrid(v.dims, side)
        except NemesisError as exc:
            raise type(exc)(f"volume {i}: {exc}") from None


def draw_example(volumes: list[Volume], params: ModelParams, tc: TrainConfig, rng):
    """(clean tokens, corrupted tokens, mask) for one sampled superpatch."""
    cfg = params.config
    vol = volumes[int(rng.integers(len(volumes)))]
    sp_seed, noise_seed, mask_seed = (int(s) for s in rng.integers(0, 2 ** 63, size=3))
    _, sp = sample_superpatch(vol, cfg.superpatch, sp_seed)
    clean = patchify(sp, cfg.patch)
    noisy = patchify(corrupt_gaussian(sp, tc.noise_sigma, noise_seed), cfg.patch)
    mask = gen_mask(cfg.grid, cfg.mask_ratio, cfg.strategy, cfg.axis, mask_seed)
    return clean, noisy, mask


def train(params: ModelParams, volumes: list[Volume], tc: TrainConfig,
          state: AdamState | None = None, on_checkpoint=None) -> tuple[ModelParams, TrainLog]:
    """Run steps ``state.t + 1 .. tc.steps``; every random draw is keyed by (seed, step).

    ``on_checkpoint(step, params, state, log)`` is called every
    ``checkpoint_interval`` steps and after the last one.
    """
    cfg = params.config
    _check_corpus(volumes, cfg.superpatch)
    state = state or AdamState()
    log = TrainLog(state=state)
    probe = draw_example(volumes, params, tc, np.random.default_rng([tc.seed, 2 ** 32]))
    start = time.perf_counter()
    for step in range(state.t + 1, tc.steps + 1):
        try:
            rng = np.random.default_rng([tc.seed, step])
            grads, total = None, 0.0
            for _ in range(tc.batch_size):
                clean, noisy, mask = draw_example(volumes, params, tc, rng)
                loss = reconstruction_loss(clean, noisy, mask, params)
                nd.backward(loss, params)
                total += loss.item()
                if grads is None:
                    grads = {k: t.grad.copy() for k, t in params.tensors.items()}
                else:
                    for k, t in params.tensors.items():
                        grads[k] += t.grad
            if tc.batch_size > 1:
                grads = {k: g / tc.batch_size for k, g in grads.items()}
            lr = lr_at(step, tc)
            params, state = optimizer_step(params, grads, state, tc, lr)
            if tc.probe_interval and step % tc.probe_interval == 0:
                with nd.no_grad():
                    log.probe.append((step, reconstruction_loss(*probe, params).item()))
        except NemesisError as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        log.records.append({"step": step, "loss": total / tc.batch_size, "lr": lr,
                            "seconds": time.perf_counter() - start})
        log.state = state
        if on_checkpoint and ((tc.checkpoint_interval and step % tc.checkpoint_interval == 0)
                              or step == tc.steps):
            on_checkpoint(step, params, state, log)
    return params, log
