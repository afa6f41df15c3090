"""Multi-output ReLU network mapping a market state to a DIM trajectory.

Inputs are min-max normalised with bounds stored on the model, hidden layers
are ReLU, the output layer is linear with one unit per monitoring time.
Training is plain mini-batch Adam on the MSE with plateau learning-rate
halving, early stopping and best-on-validation snapshots.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

HIDDEN = (256, 256, 256)
MAGIC = b"DIMMLP\0\0"
VERSION = 1
_DTYPES = {0: np.float64, 1: np.float32}


@dataclass
class MlpModel:
    layer_dims: tuple
    weights: list
    biases: list
    norm_lower: np.ndarray
    norm_upper: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need one weight matrix and bias per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k} shapes {w.shape}/{b.shape} do not chain {dims}")
        lo = np.asarray(self.norm_lower, dtype=float)
        hi = np.asarray(self.norm_upper, dtype=float)
        if lo.shape != (dims[0],) or hi.shape != (dims[0],):
            raise ValueError("normalisation bounds must match the input width")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("normalisation bounds must be finite with min < max")
        self.layer_dims, self.norm_lower, self.norm_upper = dims, lo, hi

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def with_params(self, params: list) -> "MlpModel":
        return MlpModel(self.layer_dims, list(params[0::2]), list(params[1::2]),
                        self.norm_lower, self.norm_upper, self.config_hash)

    def astype(self, dtype) -> "MlpModel":
        return self.with_params([p.astype(dtype) for p in self.params()])

    def copy(self) -> "MlpModel":
        return self.with_params([p.copy() for p in self.params()])

    # -- io -----------------------------------------------------------------
    def save(self, path) -> None:
        code = 1 if self.dtype == np.float32 else 0
        dims = self.layer_dims
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", VERSION, code, len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(self.config_hash.encode().ljust(64, b"\0")[:64])
            fh.write(self.norm_lower.astype("<f8").tobytes())
            fh.write(self.norm_upper.astype("<f8").tobytes())
            for p in self.params():
                fh.write(np.ascontiguousarray(p).astype(p.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "MlpModel":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path} is not a network file")
        version, code, nd = struct.unpack_from("<III", raw, 8)
        if version != VERSION:
            raise ValueError(f"unsupported network file version {version}")
        off = 20
        dims = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        chash = raw[off:off + 64].rstrip(b"\0").decode()
        off += 64
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")

        def take(shape, dtype):
            nonlocal off
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
            off += n * dtype.itemsize
            return arr.astype(dtype.newbyteorder("="))

        lo = take((dims[0],), np.dtype("<f8"))
        hi = take((dims[0],), np.dtype("<f8"))
        ws, bs = [], []
        for k in range(nd - 1):
            ws.append(take((dims[k], dims[k + 1]), dt))
            bs.append(take((dims[k + 1],), dt))
        return cls(dims, ws, bs, lo, hi, chash)


def glorot_init(dims, seed: int, norm_lower=None, norm_upper=None, dtype=np.float64) -> MlpModel:
    """Uniform on ``+-sqrt(6 / (fan_in + fan_out))``; zero biases."""
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fin, fout in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fin + fout))
        ws.append(rng.uniform(-lim, lim, size=(fin, fout)).astype(dtype))
        bs.append(np.zeros(fout, dtype=dtype))
    lo = np.zeros(dims[0]) if norm_lower is None else norm_lower
    hi = np.ones(dims[0]) if norm_upper is None else norm_upper
    return MlpModel(dims, ws, bs, lo, hi)


def normalise(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} inputs, got {x.shape[-1]}")
    return ((x - model.norm_lower) / (model.norm_upper - model.norm_lower)).astype(model.dtype)


def outside_bounds(model: MlpModel, x) -> np.ndarray:
    """Rows that require extrapolation beyond the training box."""
    x = np.atleast_2d(x)
    return np.any((x < model.norm_lower) | (x > model.norm_upper), axis=-1)


def forward_cache(model: MlpModel, xn: np.ndarray):
    """Activations of every layer for normalised inputs ``xn``."""
    acts = [xn]
    a = xn
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if k == last else np.maximum(z, 0)
        acts.append(a)
    return acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Predicted trajectories for raw states ``x`` of shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    out = forward_cache(model, normalise(model, np.atleast_2d(x)))[-1]
    return out[0] if x.ndim == 1 else out


def backward(model: MlpModel, acts: list, dout: np.ndarray) -> list:
    """Parameter gradients ``[dW0, db0, dW1, ...]`` given ``d objective / d output``."""
    grads = []
    delta = dout
    for k in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[k].T @ delta)
        if k:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return grads[::-1]


def mse_loss(pred, label) -> float:
    pred, label = np.asarray(pred), np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {label.shape}")
    return float(np.mean((pred - label) ** 2))


def loss_and_grads(model: MlpModel, xn: np.ndarray, y: np.ndarray):
    acts = forward_cache(model, xn)
    err = acts[-1] - y
    loss = float(np.mean(err * err))
    return loss, backward(model, acts, err * (2.0 / err.size))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new params and advances ``state``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("gradient shapes do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        upd = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append((p - lr * upd).astype(p.dtype, copy=False))
    return out, state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    max_epochs: int = 2000
    initial_lr: float = 1e-3
    lr_floor: float = 1e-6
    plateau_patience: int = 50
    lr_factor: float = 0.5
    stop_patience: int = 200
    # validation MSE below (tolerance_scale * max validation stderr)^2 stops training
    tolerance_scale: float = 1.0
    max_steps: int | None = None
    hidden: tuple = HIDDEN
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        ints = (self.batch_size, self.max_epochs, self.plateau_patience, self.stop_patience)
        if min(ints) < 1 or self.max_steps is not None and self.max_steps < 1:
            raise ValueError("batch size, epochs, patience and step budget must be positive")
        if not 0 < self.lr_floor < self.initial_lr:
            raise ValueError("need 0 < lr_floor < initial_lr")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    steps: int = 0
    wall_time: float = 0.0

    @property
    def best_val_rmse(self) -> float:
        return float(np.sqrt(self.val_mse[self.best_epoch])) if self.val_mse else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_mse,val_mse,lr\n")
            for i, (a, b, c) in enumerate(zip(self.train_mse, self.val_mse, self.lr)):
                fh.write(f"{i + 1},{a:.17g},{b:.17g},{c:.17g}\n")


def _check_compatible(train_set, val_set):
    if train_set.states.shape[1] != val_set.states.shape[1]:
        raise ValueError("training and validation sets have different input widths")
    if train_set.labels.shape[1] != val_set.labels.shape[1]:
        raise ValueError("training and validation sets have different output widths")
    g1, g2 = train_set.metadata.get("grid"), val_set.metadata.get("grid")
    if g1 and g2 and g1 != g2:
        raise ValueError(f"grid mismatch: {g1} vs {g2}")


def _bounds_for(train_set):
    b = train_set.metadata.get("bounds")
    names = train_set.metadata.get("names")
    if b and names:
        return np.array([b[n][0] for n in names]), np.array([b[n][1] for n in names])
    lo, hi = train_set.states.min(0), train_set.states.max(0)
    return lo, np.where(hi > lo, hi, lo + 1.0)


def train(train_set, val_set, cfg: TrainConfig = TrainConfig()):
    """Fit a network to ``train_set``; returns the best-validation snapshot and report."""
    _check_compatible(train_set, val_set)
    t_start = time.perf_counter()
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    lo, hi = _bounds_for(train_set)
    d, n_out = train_set.states.shape[1], train_set.labels.shape[1]
    model = glorot_init((d,) + cfg.hidden + (n_out,), cfg.seed, lo, hi, dtype)
    # Outputs whose training labels are all exactly zero (times after the last
    # maturity) are pinned: their output weights start at zero and never move.
    pinned = np.all(np.asarray(train_set.labels) == 0, axis=0)
    model.weights[-1][:, pinned] = 0
    model.biases[-1][pinned] = 0
    model.config_hash = cfg.digest()
    xs = normalise(model, train_set.states)
    ys = np.asarray(train_set.labels, dtype=dtype)
    xv = normalise(model, val_set.states)
    yv = np.asarray(val_set.labels, dtype=float)
    tol = cfg.tolerance_scale * (float(np.max(val_set.stderr)) if val_set.stderr is not None else 0.0)

    rng = np.random.default_rng([cfg.seed, 1])
    params = model.params()
    adam = AdamState.zeros_like(params)
    lr = cfg.initial_lr
    report = TrainReport()
    best, best_mse = model.copy(), np.inf
    since_best = since_lr = 0
    k = len(xs)
    with threadpool_limits(limits=1):
        for epoch in range(cfg.max_epochs):
            perm = rng.permutation(k)
            tot, seen = 0.0, 0
            for s in range(0, k, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                loss, grads = loss_and_grads(model, xs[idx], ys[idx])
                grads[-2][:, pinned] = 0
                grads[-1][pinned] = 0
                params, adam = adam_step(params, grads, adam, lr)
                model = model.with_params(params)
                tot += loss * len(idx)
                seen += len(idx)
                report.steps += 1
                if cfg.max_steps and report.steps >= cfg.max_steps:
                    break
            pred = forward_cache(model, xv)[-1].astype(float)
            vmse = mse_loss(pred, yv)
            report.train_mse.append(tot / seen)
            report.val_mse.append(vmse)
            report.lr.append(lr)
            if vmse < best_mse:
                best, best_mse = model.copy(), vmse
                report.best_epoch = epoch
                since_best = since_lr = 0
            else:
                since_best += 1
                since_lr += 1
            if vmse < tol * tol:
                report.stop_reason = "tolerance"
                break
            if since_best >= cfg.stop_patience:
                report.stop_reason = "no-improvement"
                break
            if cfg.max_steps and report.steps >= cfg.max_steps:
                report.stop_reason = "step-budget"
                break
            if since_lr >= cfg.plateau_patience:
                lr = max(lr * cfg.lr_factor, cfg.lr_floor)
                since_lr = 0
        else:
            report.stop_reason = "max-epochs"
    report.wall_time = time.perf_counter() - t_start
    return best, report


def rmse(model: MlpModel, states, labels) -> float:
    return float(np.sqrt(mse_loss(forward(model, states).astype(float), labels)))
