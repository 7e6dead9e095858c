"""Composite loss and the three-phase progressive training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .cpn.checkpoint import ModelState
from .cpn.model import CAUSAL_PARAMS, Batch, ForwardOutput, base_counterfactual, encode_neighbors, forward
from .features import DEFAULT_LAMBDA
from .numerics import NonFiniteError, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta_loss: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        if self.beta_loss < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 3e-5
    weight_decay: float = 1e-2
    clip_norm: float = 5.0
    patience: int = 50
    phase_fractions: tuple[float, float, float] = (0.2, 0.4, 0.4)
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    beta_loss: float = 0.1
    gamma: float = 0.01
    sign_scale_kmh: float = 1.0
    phase3_gate_logit: float = 2.0
    # optional caps that keep desk-scale runs short
    max_batches_per_epoch: int | None = None
    val_windows: int | None = None
    # share of each batch drawn from windows that carry an event
    event_share: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "phase_fractions", tuple(float(f) for f in self.phase_fractions))
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.lr < 0 or self.weight_decay < 0 or not self.clip_norm > 0:
            raise ValueError("lr and weight_decay must be >= 0, clip_norm > 0")
        if len(self.phase_fractions) != 3 or min(self.phase_fractions) < 0 \
                or abs(sum(self.phase_fractions) - 1) > 1e-9:
            raise ValueError("phase_fractions must be three non-negative numbers summing to 1")
        if not self.lam > 0 or not self.sign_scale_kmh > 0:
            raise ValueError("lam and sign_scale_kmh must be positive")
        LossWeights(self.beta_loss, self.gamma)
        if self.event_share is not None and not 0 <= self.event_share <= 1:
            raise ValueError("event_share must lie in [0, 1]")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta_loss, self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_fractions"] = list(self.phase_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# -- losses -------------------------------------------------------------------

def loss_mse(y_hat, y) -> Tensor:
    y_hat = nx.as_tensor(y_hat)
    y = np.asarray(y.value if isinstance(y, Tensor) else y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise nx.ShapeError("loss_mse", y_hat.shape, y.shape)
    return ((y_hat - y) ** 2).mean()


def loss_causal(a_causal, y, y_base_cf, event, scale: float = 1.0) -> Tensor:
    """Soft-sign hinge ``max(0, -tanh(a/s) * tanh((y - y_cf)/s))`` averaged
    over the event elements; 0 when the batch has none. ``y_base_cf`` is a
    constant."""
    a = nx.as_tensor(a_causal)
    event = np.asarray(event, dtype=bool).reshape(-1)
    n = int(event.sum())
    if n == 0:
        return Tensor(0.0)
    resid = np.tanh((np.asarray(y, dtype=np.float64) - np.asarray(y_base_cf, dtype=np.float64)) / scale)
    weight = resid * event.reshape((-1,) + (1,) * (a.ndim - 1))
    per = nx.relu(-(nx.tanh(a / scale) * weight))
    return per.sum() / (n * (a.size // len(event)))


def loss_entropy(alpha) -> Tensor:
    """``sum alpha log alpha`` over heads and the T x T map, averaged over
    the batch; ``0 log 0 = 0``."""
    alpha = nx.as_tensor(alpha)
    B = alpha.shape[0] if alpha.ndim == 4 else 1
    return nx.xlogx(alpha).sum() / B


def combine(mse, causal, entropy, weights: LossWeights, phase: int):
    """Phase 1 keeps only the prediction error."""
    if phase not in (1, 2, 3):
        raise ValueError(f"phase must be 1, 2 or 3, got {phase}")
    if phase == 1:
        return mse
    return mse + weights.beta_loss * causal + weights.gamma * entropy


def composite_loss(out: ForwardOutput, y, y_base_cf, event, weights: LossWeights, phase: int,
                   scale: float = 1.0) -> tuple[Tensor, dict]:
    mse = loss_mse(out.y_hat, y)
    if phase == 1:
        total = combine(mse, None, None, weights, 1)
        return total, {"mse": mse.item(), "causal": 0.0, "entropy": 0.0}
    causal = loss_causal(out.a_causal, y, y_base_cf, event, scale)
    ent = loss_entropy(out.alpha)
    total = combine(mse, causal, ent, weights, phase)
    return total, {"mse": mse.item(), "causal": causal.item(), "entropy": ent.item()}


# -- optimizer ------------------------------------------------------------------

def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients jointly so their global norm is at most ``max_norm``.
    Returns the clipped gradients and the norm before clipping."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


class AdamW:
    """Adam with decoupled weight decay; moments are kept per parameter and
    can be reset individually."""

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def reset(self, name: str) -> None:
        for d in (self.m, self.v, self.t):
            d.pop(name, None)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """Update exactly the parameters named in ``grads``."""
        b1, b2 = self.betas
        for name, g in grads.items():
            p = params[name]
            t = self.t.get(name, 0) + 1
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.t[name], self.m[name], self.v[name] = t, m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            new = p.value * (1 - self.lr * self.wd) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.value = np.asarray(new, dtype=np.float64).reshape(p.value.shape)
            p.value.flags.writeable = False


# -- schedule -------------------------------------------------------------------

def phase_bounds(epochs: int, fractions) -> tuple[int, int]:
    """Last epoch (1-based, inclusive) of phases 1 and 2."""
    e1 = int(round(fractions[0] * epochs))
    e2 = int(round((fractions[0] + fractions[1]) * epochs))
    return e1, e2


def phase_of(epoch: int, epochs: int, fractions) -> int:
    e1, e2 = phase_bounds(epochs, fractions)
    return 1 if epoch <= e1 else 2 if epoch <= e2 else 3


class EarlyStopping:
    """Counts epochs without a strict improvement of the monitored value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.reset()

    def reset(self) -> None:
        self.best = math.inf
        self.bad = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best, self.bad = value, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict]
    stopped_early: bool = False
    best_val_mse: float = math.inf
    phases_run: list[int] = field(default_factory=list)


def _param_report(params) -> str:
    return ", ".join(f"{k}={np.linalg.norm(p.value):.3g}" for k, p in params.items())


def _windows_batch(windows, pairs, phase):
    b = windows.batch(pairs)
    return b.neutral() if phase == 1 else b


def evaluate_mse(state: ModelState, windows, pairs, phase: int = 3, batch_size: int = 1024) -> float:
    """Validation MSE in squared km/h."""
    if len(pairs) == 0:
        return math.nan
    total = 0.0
    with nx.no_grad():
        for i in range(0, len(pairs), batch_size):
            b = _windows_batch(windows, pairs[i:i + batch_size], phase)
            out = forward(state.params, state.config, b)
            total += float(np.sum((out.y_hat.value - b.y) ** 2))
    return total / (len(pairs) * state.config.horizon) * state.normalizer.std ** 2


def train_step(state: ModelState, batch: Batch, phase: int, cfg: TrainConfig, opt: AdamW,
               frozen=()) -> dict:
    """One optimizer step; returns loss parts, pre-clip norm and the clipped norm."""
    p = state.params
    for k, t in p.items():
        t.zero_grad()
        t.requires_grad = k not in frozen     # frozen weights act as constants
    try:
        return _step(state, batch, phase, cfg, opt, frozen)
    finally:
        for t in p.values():
            t.requires_grad = True


def _step(state, batch, phase, cfg, opt, frozen) -> dict:
    p = state.params
    hn = encode_neighbors(batch.xn, p)
    out = forward(p, state.config, batch, neighbor_states=hn)
    y_cf = np.zeros_like(batch.y)
    if phase > 1 and batch.event.any():
        idx = np.nonzero(batch.event)[0]
        sub = batch.take(idx)
        y_cf[idx] = base_counterfactual(p, state.config, sub, nx.Tensor(hn.value[idx])).value
    scale = cfg.sign_scale_kmh / state.normalizer.std
    loss, parts = composite_loss(out, batch.y, y_cf, batch.event, cfg.weights, phase, scale)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("non-finite loss")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape))
             for k, t in p.items() if k not in frozen}
    clipped, norm = clip_gradients(grads, cfg.clip_norm)
    opt.step(p, clipped)
    parts.update(grad_norm=norm, clipped_norm=global_norm(clipped), total=loss.item())
    return parts


def _event_windows(windows, pairs) -> np.ndarray:
    T = windows.config.lookback
    flags = windows.event_mask
    cum = np.concatenate([np.zeros((flags.shape[0], 1)), np.cumsum(flags, axis=1)], axis=1)
    seg, anc = pairs[:, 0], pairs[:, 1]
    return np.nonzero(cum[seg, anc + 1] - cum[seg, anc + 1 - T] > 0)[0]


def _epoch_batches(rng, n_train, event_idx, cfg) -> list[np.ndarray]:
    order = rng.permutation(n_train)
    n_batches = math.ceil(n_train / cfg.batch_size)
    if cfg.max_batches_per_epoch is not None:
        n_batches = min(n_batches, cfg.max_batches_per_epoch)
    if not cfg.event_share or len(event_idx) == 0:
        return [order[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(n_batches)]
    n_ev = int(round(cfg.event_share * cfg.batch_size))
    n_rest = cfg.batch_size - n_ev
    ev = event_idx[rng.integers(0, len(event_idx), n_batches * n_ev)]
    return [np.concatenate([order[i * n_rest:(i + 1) * n_rest], ev[i * n_ev:(i + 1) * n_ev]])
            for i in range(n_batches)]


def progressive_train(state: ModelState, windows, cfg: TrainConfig,
                      log_path=None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Three-phase schedule with per-phase early stopping memory.

    Phase 1 trains on neutral causal features with the causal stream frozen;
    phase 2 unfreezes it under the full loss; phase 3 re-opens the gate at
    ``phase3_gate_logit`` first. The patience counter restarts at each phase
    boundary; when it runs out, the best weights of the current phase are
    restored and training halts. The same restore happens after the last
    epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    train = windows.windows["train"]
    val = windows.windows["validation"]
    if len(train) == 0:
        raise ValueError("no training windows")
    if cfg.val_windows is not None and len(val) > cfg.val_windows:
        val = val[np.sort(rng.choice(len(val), cfg.val_windows, replace=False))]
    event_idx = _event_windows(windows, train) if cfg.event_share else np.zeros(0, dtype=np.int64)
    opt = AdamW(cfg.lr, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    log: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    best_snap, phase_prev, stopped = None, 0, False
    phases: list[int] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            phase = phase_of(epoch, cfg.epochs, cfg.phase_fractions)
            if phase != phase_prev:
                stopper.reset()
                best_snap = None
                phases.append(phase)
                if phase == 3:
                    state.params["g_raw"].value = np.array(cfg.phase3_gate_logit)
                    opt.reset("g_raw")
                phase_prev = phase
            state.phase = phase
            frozen = set(CAUSAL_PARAMS) if phase == 1 else set()
            batches = _epoch_batches(rng, len(train), event_idx, cfg)
            n_batches = len(batches)
            sums = {"mse": 0.0, "causal": 0.0, "entropy": 0.0, "grad_norm": 0.0}
            for bi, idx in enumerate(batches):
                pairs = train[idx]
                batch = _windows_batch(windows, pairs, phase)
                try:
                    parts = train_step(state, batch, phase, cfg, opt, frozen)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch}, batch {bi}: {exc}; "
                        f"parameter norms: {_param_report(state.params)}") from None
                for k in sums:
                    sums[k] += parts[k]
            val_mse = evaluate_mse(state, windows, val, phase)
            if stopper.update(val_mse) or best_snap is None:
                best_snap = state.snapshot()
            row = {
                "epoch": epoch, "phase": phase,
                "train_mse": sums["mse"] / n_batches * state.normalizer.std ** 2,
                "val_mse": val_mse,
                "loss_causal": sums["causal"] / n_batches,
                "loss_entropy": sums["entropy"] / n_batches,
                "grad_norm": sums["grad_norm"] / n_batches,
                "gate": 1.0 / (1.0 + math.exp(-float(state.params["g_raw"].value))),
            }
            log.append(row)
            if fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if on_epoch:
                on_epoch(row)
            if stopper.should_stop:
                stopped = True
                break
    finally:
        if fh:
            fh.close()
    if best_snap is not None:
        state.restore(best_snap)
    state.extra = dict(state.extra, epochs_run=len(log), stopped_early=stopped)
    return TrainResult(state, log, stopped, stopper.best, phases)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
