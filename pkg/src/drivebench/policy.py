"""Convolutional encoder plus GRU waypoint decoder in numpy, with
hand-written backpropagation, AdamW training and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .sensors import BEV_CELLS

CHANNELS = (2, 8, 16, 32, 64)
HIDDEN = 64
T_STEPS = 4
BEV_SCALE = 8.0
INPUT_SCALE = 0.1
CKPT_MAGIC = b"DBCK"
CKPT_VERSION = 1


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyDataset(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    reduction: str = "sum"  # per-sample loss: "sum" or "mean" over the T waypoints
    input_scale: float = INPUT_SCALE

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:32]


# parameters


def param_shapes(hidden: int = HIDDEN, channels: tuple[int, ...] = CHANNELS) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for k in range(len(channels) - 1):
        shapes.append((f"conv{k + 1}_w", (channels[k + 1], channels[k], 3, 3)))
        shapes.append((f"conv{k + 1}_b", (channels[k + 1],)))
    shapes += [
        ("gru_wi", (3 * hidden, 4)),
        ("gru_wh", (3 * hidden, hidden)),
        ("gru_bi", (3 * hidden,)),
        ("gru_bh", (3 * hidden,)),
        ("head_w", (2, hidden)),
        ("head_b", (2,)),
    ]
    return shapes


def init_params(seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform in +-1/sqrt(fan_in); GRU tensors use the hidden size as fan-in."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes():
        if name.startswith("conv"):
            k = int(name[4])
            fan_in = CHANNELS[k - 1] * 9
        elif name.startswith("gru"):
            fan_in = HIDDEN
        else:
            fan_in = HIDDEN
        bound = 1.0 / math.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# layers


def _im2col(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """3x3, stride 2, pad 1 patches of NHWC input as (B*Ho*Wo, 9*C)."""
    H, W = x.shape[1:3]
    return _kernels.im2col_s2(x), ((H - 1) // 2 + 1, (W - 1) // 2 + 1)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], out_hw: tuple[int, int]) -> np.ndarray:
    return _kernels.col2im_s2(dcols, *x_shape)


def _conv_matrix(W: np.ndarray) -> np.ndarray:
    """(Cout, Cin, 3, 3) -> (9*Cin, Cout) matching the patch column order."""
    return W.transpose(2, 3, 1, 0).reshape(-1, W.shape[0])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def prepare_input(bev: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, H, W, 2) counts -> (B, H, W, 2) in [0, 1]."""
    x = np.asarray(bev)
    if x.ndim == 3:
        x = x[None]
    return np.minimum(x.astype(dtype) * dtype(1.0 / BEV_SCALE), dtype(1.0))


@dataclass
class Cache:
    convs: list = field(default_factory=list)  # (cols, x_shape, out_hw, pre-activation)
    feat_hw: tuple = ()
    steps: list = field(default_factory=list)
    hs: list = field(default_factory=list)


def forward(params: dict[str, np.ndarray], x: np.ndarray, goal: np.ndarray, T: int = T_STEPS,
            input_scale: float = INPUT_SCALE, keep: bool = False):
    """Predict (B, T, 2) waypoints from prepared BEV input and ego-frame goals."""
    dt = x.dtype
    cache = Cache() if keep else None
    h = x
    n_conv = len(CHANNELS) - 1
    B = h.shape[0]
    for k in range(1, n_conv + 1):
        W = params[f"conv{k}_w"]
        cols, hw = _im2col(h)
        z = cols @ _conv_matrix(W) + params[f"conv{k}_b"]
        if keep:
            cache.convs.append((cols, h.shape, hw, z))
        h = np.maximum(z, 0).reshape(B, hw[0], hw[1], W.shape[0])
    if keep:
        cache.feat_hw = h.shape[1:3]
    hid = h.reshape(B, -1, h.shape[3]).mean(axis=1)
    H = hid.shape[1]
    wi, wh, bi, bh = params["gru_wi"], params["gru_wh"], params["gru_bi"], params["gru_bh"]
    hw_, hb = params["head_w"], params["head_b"]
    g = np.asarray(goal, dtype=dt).reshape(B, 2) * dt.type(input_scale)
    w = np.zeros((B, 2), dtype=dt)
    outs = []
    if keep:
        cache.hs.append(hid)
    for _ in range(T):
        xin = np.concatenate([w * dt.type(input_scale), g], axis=1)
        gi = xin @ wi.T + bi
        gh = hid @ wh.T + bh
        r = _sigmoid(gi[:, :H] + gh[:, :H])
        z = _sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
        h_new = (1 - z) * n + z * hid
        if keep:
            cache.steps.append((xin, hid, r, z, n, gh[:, 2 * H:]))
        hid = h_new
        if keep:
            cache.hs.append(hid)
        w = w + hid @ hw_.T + hb
        outs.append(w)
    return np.stack(outs, axis=1), cache


def loss_and_grad_output(pred: np.ndarray, target: np.ndarray, reduction: str = "sum") -> tuple[float, np.ndarray]:
    """Batch mean of per-sample L1 waypoint error and its gradient wrt ``pred``."""
    if pred.shape != target.shape:
        raise LengthMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    per = np.abs(diff).sum(axis=(1, 2))
    B = pred.shape[0]
    scale = 1.0 / B
    if reduction == "mean":
        per = per / pred.shape[1]
        scale /= pred.shape[1]
    return float(per.mean()), np.sign(diff) * pred.dtype.type(scale)


def waypoint_loss(pred, target, reduction: str = "sum") -> float:
    """Per-sample L1 loss summed over the T waypoints (``mean`` divides by T)."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise LengthMismatch(f"prediction {p.shape} vs target {t.shape}")
    v = float(np.abs(p - t).sum())
    return v / p.shape[-2] if reduction == "mean" else v


def backward(params: dict[str, np.ndarray], cache: Cache, dpred: np.ndarray,
             input_scale: float = INPUT_SCALE) -> dict[str, np.ndarray]:
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    wi, wh = params["gru_wi"], params["gru_wh"]
    hw_ = params["head_w"]
    H = wh.shape[1]
    T = dpred.shape[1]
    dt = dpred.dtype.type
    B = dpred.shape[0]
    dw = np.zeros((B, 2), dtype=dpred.dtype)  # gradient wrt w_t flowing from later steps
    dh = np.zeros((B, H), dtype=dpred.dtype)
    for t in range(T - 1, -1, -1):
        dw = dw + dpred[:, t]
        h_t = cache.hs[t + 1]
        grads["head_w"] += dw.T @ h_t
        grads["head_b"] += dw.sum(axis=0)
        dh = dh + dw @ hw_
        xin, h_prev, r, z, n, ghn = cache.steps[t]
        dn = dh * (1 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1 - n * n)
        dghn = dan * r
        dr = dan * ghn
        dar = dr * r * (1 - r)
        daz = dz * z * (1 - z)
        dgi = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dghn], axis=1)
        grads["gru_wi"] += dgi.T @ xin
        grads["gru_bi"] += dgi.sum(axis=0)
        grads["gru_wh"] += dgh.T @ h_prev
        grads["gru_bh"] += dgh.sum(axis=0)
        dh = dh_prev + dgh @ wh
        dxin = dgi @ wi
        # w_t = w_{t-1} + delta: the identity path plus the recurrent input
        dw = dw + dxin[:, :2] * dt(input_scale)
    # h0 is the pooled feature
    C = CHANNELS[-1]
    fh, fw = cache.feat_hw
    dout = np.broadcast_to((dh / dt(fh * fw))[:, None, :], (B, fh * fw, C))
    n_conv = len(CHANNELS) - 1
    for k in range(n_conv, 0, -1):
        cols, x_shape, hw, z = cache.convs[k - 1]
        dz_ = dout.reshape(z.shape) * (z > 0)
        W = params[f"conv{k}_w"]
        gw = cols.T @ dz_
        grads[f"conv{k}_w"] += gw.reshape(3, 3, W.shape[1], W.shape[0]).transpose(3, 2, 0, 1)
        grads[f"conv{k}_b"] += dz_.sum(axis=0)
        if k > 1:
            dout = _col2im(dz_ @ _conv_matrix(W).T, x_shape, hw)
    return grads


def loss(params: dict[str, np.ndarray], bev: np.ndarray, goal: np.ndarray, target: np.ndarray,
         reduction: str = "sum", input_scale: float = INPUT_SCALE) -> float:
    """Mean per-sample loss of ``params`` on a batch."""
    target = np.asarray(target)
    x = prepare_input(bev, np.float64)
    pred, _ = forward({k: v.astype(np.float64) for k, v in params.items()}, x, goal, target.shape[1],
                      input_scale)
    return loss_and_grad_output(pred, target.astype(np.float64), reduction)[0]


def loss_and_grads(params, x, goal, target, reduction: str = "sum", input_scale: float = INPUT_SCALE):
    pred, cache = forward(params, x, goal, target.shape[1], input_scale, keep=True)
    value, dpred = loss_and_grad_output(pred, target, reduction)
    return value, backward(params, cache, dpred, input_scale)


# optimizer


@dataclass
class AdamW:
    lr: float
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig, params: dict[str, np.ndarray]) -> "AdamW":
        return cls(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, 0,
                   {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# checkpoints


@dataclass
class Checkpoint:
    epoch: int
    params: dict[str, np.ndarray]
    config_hash: str
    seed: int
    train_loss: float = float("nan")
    optimizer: AdamW | None = None
    rng_state: dict | None = None
    history: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        names = [n for n, _ in param_shapes()]
        blob = b"".join(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes() for n in names)
        opt = b""
        meta = {"history": self.history, "rng_state": self.rng_state}
        if self.optimizer is not None:
            o = self.optimizer
            opt = b"".join(np.ascontiguousarray(d[n], dtype="<f4").tobytes() for d in (o.m, o.v) for n in names)
            meta["optimizer"] = {"lr": o.lr, "weight_decay": o.weight_decay, "beta1": o.beta1,
                                 "beta2": o.beta2, "eps": o.eps, "step": o.step}
        meta_b = json.dumps(meta, sort_keys=True).encode()
        head = struct.pack("<4sIIQ32sd I Q Q I", CKPT_MAGIC, CKPT_VERSION, self.epoch, self.seed,
                           self.config_hash.encode()[:32].ljust(32, b"\0"), self.train_loss,
                           len(names), len(blob), len(opt), len(meta_b))
        Path(path).write_bytes(head + blob + opt + meta_b)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        data = Path(path).read_bytes()
        fmt = "<4sIIQ32sd I Q Q I"
        size = struct.calcsize(fmt)
        if len(data) < size:
            raise CheckpointError(f"{path}: truncated header")
        magic, ver, epoch, seed, chash, tl, n_t, n_blob, n_opt, n_meta = struct.unpack(fmt, data[:size])
        if magic != CKPT_MAGIC or ver != CKPT_VERSION:
            raise CheckpointError(f"{path}: not a checkpoint")
        if len(data) != size + n_blob + n_opt + n_meta:
            raise CheckpointError(f"{path}: size mismatch")
        shapes = param_shapes()
        if n_t != len(shapes) or n_blob != 4 * sum(int(np.prod(s)) for _, s in shapes):
            raise CheckpointError(f"{path}: parameter layout mismatch")

        def unpack(buf: bytes) -> dict[str, np.ndarray]:
            out, off = {}, 0
            for name, shape in shapes:
                cnt = int(np.prod(shape))
                out[name] = np.frombuffer(buf, dtype="<f4", count=cnt, offset=off).reshape(shape).astype(np.float32)
                off += 4 * cnt
            return out

        params = unpack(data[size:size + n_blob])
        meta = json.loads(data[size + n_blob + n_opt:].decode())
        opt = None
        if n_opt:
            ob = data[size + n_blob:size + n_blob + n_opt]
            o = meta["optimizer"]
            opt = AdamW(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["step"],
                        unpack(ob[: n_opt // 2]), unpack(ob[n_opt // 2:]))
        return cls(epoch, params, chash.rstrip(b"\0").decode(), seed, tl, opt, meta.get("rng_state"),
                   meta.get("history", []))


def checkpoint_path(directory: str | Path, epoch: int) -> Path:
    return Path(directory) / f"epoch_{epoch:03d}.ckpt"


# training


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for a in range(0, n, size):
        yield perm[a:a + size]


def train(dataset, config: TrainConfig = TrainConfig(), out_dir: str | Path | None = None,
          resume: str | Path | None = None, log: Callable[[str], None] | None = None,
          on_epoch: Callable[[int, dict], None] | None = None) -> Checkpoint:
    """Minibatch AdamW on the L1 waypoint loss; one checkpoint per epoch.

    Each epoch's recorded train loss is the frame-weighted mean of batch
    losses observed during that epoch.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("training set is empty")
    chash = config.digest()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ck = Checkpoint.load(resume)
        if ck.config_hash != chash:
            raise CheckpointError("resume checkpoint was trained with a different configuration")
        params = ck.params
        opt = ck.optimizer or AdamW.from_config(config, params)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        history = list(ck.history)
        start = ck.epoch
    else:
        params = init_params(config.seed)
        opt = AdamW.from_config(config, params)
        rng = np.random.default_rng([config.seed, 0x7A1])
        history = []
        start = 0
        if out_dir is not None:
            Checkpoint(0, {k: v.copy() for k, v in params.items()}, chash, config.seed, float("nan"), None,
                       rng.bit_generator.state, []).save(checkpoint_path(out_dir, 0))
    ck = None
    for epoch in range(start + 1, config.epochs + 1):
        total = 0.0
        steps = []
        for idx in _batches(n, config.batch_size, rng):
            idx = np.sort(idx)
            x = prepare_input(dataset.bev[idx])
            value, grads = loss_and_grads(params, x, dataset.goal[idx], dataset.waypoints[idx],
                                          config.reduction, config.input_scale)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
            opt.update(params, grads)
            total += value * len(idx)
            steps.append(round(value, 6))
        entry = {"epoch": epoch, "train_loss": total / n, "batch_losses": steps}
        history.append(entry)
        ck = Checkpoint(epoch, params, chash, config.seed, total / n, opt, rng.bit_generator.state, history)
        if out_dir is not None:
            ck.save(checkpoint_path(out_dir, epoch))
        if log is not None:
            log(f"epoch {epoch} train_loss {total / n:.4f}")
        if on_epoch is not None:
            on_epoch(epoch, entry)
    if ck is None:
        ck = Checkpoint(start, params, chash, config.seed, history[-1]["train_loss"] if history else float("nan"),
                        opt, rng.bit_generator.state, history)
    return Checkpoint(ck.epoch, {k: v.copy() for k, v in ck.params.items()}, ck.config_hash, ck.seed,
                      ck.train_loss, ck.optimizer, ck.rng_state, list(ck.history))


def offline_val_loss(params, dataset, reduction: str = "sum", batch: int = 256,
                     input_scale: float = INPUT_SCALE) -> float:
    """Mean per-frame loss of ``params`` on a held-out dataset."""
    if isinstance(params, Checkpoint):
        params = params.params
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("validation set is empty")
    total = 0.0
    for a in range(0, n, batch):
        sl = slice(a, min(a + batch, n))
        pred, _ = forward(params, prepare_input(dataset.bev[sl]), dataset.goal[sl], dataset.waypoints.shape[1],
                          input_scale)
        v, _ = loss_and_grad_output(pred.astype(np.float64), dataset.waypoints[sl].astype(np.float64), reduction)
        total += v * (sl.stop - sl.start)
    return total / n


def predict(params, bev: np.ndarray, goal: np.ndarray, T: int = T_STEPS,
            input_scale: float = INPUT_SCALE) -> np.ndarray:
    pred, _ = forward(params, prepare_input(bev), np.asarray(goal).reshape(-1, 2), T, input_scale)
    return pred


# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    probes: int
    resampled: int

    @property
    def head_error(self) -> float:
        return max(self.per_tensor["head_w"], self.per_tensor["head_b"])


def _kink_signature(params, x, goal, target, input_scale) -> tuple:
    pred, cache = forward(params, x, goal, target.shape[1], input_scale, keep=True)
    masks = tuple((z > 0).tobytes() for _, _, _, z in cache.convs)
    return masks + (np.sign(pred - target).tobytes(),)


def grad_check(params: dict[str, np.ndarray] | None = None, bev=None, goal=None, target=None,
               probes_per_tensor: int = 12, h: float = 1e-5, seed: int = 0, batch: int = 2,
               input_scale: float = INPUT_SCALE, floor: float = 1e-8) -> GradCheckReport:
    """Analytic gradient against central differences in float64.

    Probes whose +-h perturbation flips a ReLU or the sign of an L1
    residual are redrawn. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(seed)
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    if bev is None:
        bev = rng.poisson(0.6, size=(batch, BEV_CELLS, BEV_CELLS, 2))
        goal = rng.uniform(-20, 20, size=(batch, 2))
        target = np.cumsum(rng.uniform(0, 3, size=(batch, T_STEPS, 2)), axis=1)
    x = prepare_input(bev, np.float64)
    goal = np.asarray(goal, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64)
    _, grads = loss_and_grads(p64, x, goal, target, "sum", input_scale)
    base_sig = _kink_signature(p64, x, goal, target, input_scale)

    def f() -> float:
        pred, _ = forward(p64, x, goal, target.shape[1], input_scale)
        return loss_and_grad_output(pred, target)[0]

    per: dict[str, float] = {}
    resampled = 0
    total = 0
    for name, arr in p64.items():
        worst = 0.0
        done = 0
        tries = 0
        while done < min(probes_per_tensor, arr.size) and tries < 20 * probes_per_tensor:
            tries += 1
            i = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
            old = arr[i]
            arr[i] = old + h
            sp = _kink_signature(p64, x, goal, target, input_scale)
            fp = f()
            arr[i] = old - h
            sm = _kink_signature(p64, x, goal, target, input_scale)
            fm = f()
            arr[i] = old
            if sp != base_sig or sm != base_sig:
                resampled += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(grads[name][i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            done += 1
            total += 1
        per[name] = worst
    return GradCheckReport(max(per.values()), per, total, resampled)


# closed-loop driver


class PolicyDriver:
    """Queries the network on the BEV histogram and goal; returns ego-frame waypoints."""

    needs_observation = True

    def __init__(self, params: dict[str, np.ndarray] | Checkpoint, T: int = T_STEPS,
                 input_scale: float = INPUT_SCALE):
        self.params = params.params if isinstance(params, Checkpoint) else params
        self.T = T
        self.input_scale = input_scale

    def reset(self, ctx) -> None:
        pass

    def __call__(self, world, ctx, observation) -> np.ndarray:
        return predict(self.params, observation.bev[None], observation.goal[None], self.T, self.input_scale)[0]
