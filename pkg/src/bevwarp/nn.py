"""Minimal differentiable substrate for the planner's fixed architectures.

Not a general autodiff: only the block set the generator and discriminator
need (affine, SiLU gating, softmax attention, sigmoid, layer norm, MSE,
log/entropy, clip-with-stop-gradient) plus arithmetic glue, each with a
hand-derived backward pass recorded on a tape. Everything is float64 and
every block is finite-difference checked in the test suite.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class NonFiniteGradient(RuntimeError):
    """Signals the caller to skip the offending batch."""


# ---------------------------------------------------------------------------
# Parameters

class ParamSet:
    """Named dense arrays plus adaptive-moment optimizer state."""

    def __init__(self, meta: Optional[dict] = None):
        self.arrays: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step: int = 0
        self.meta: dict = dict(meta or {})

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter {name}")
        value = np.asarray(value, dtype=np.float64)
        self.arrays[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> List[str]:
        return sorted(self.arrays)

    def n_entries(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ParamSet":
        out = ParamSet(meta=json.loads(json.dumps(self.meta)))
        for name, arr in self.arrays.items():
            out.arrays[name] = arr.copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out


def init_linear(params: ParamSet, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator) -> None:
    """Fan-in scaled uniform weights, zero bias."""
    bound = 1.0 / np.sqrt(d_in)
    params.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
    params.add(f"{prefix}.b", np.zeros(d_out))


def init_mlp(params: ParamSet, prefix: str, dims: Sequence[int],
             rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        init_linear(params, f"{prefix}.l{i}", dims[i], dims[i + 1], rng)


def init_attention(params: ParamSet, prefix: str, d_q: int, d_kv: int,
                   d_att: int, rng: np.random.Generator) -> None:
    bound_q = 1.0 / np.sqrt(d_q)
    bound_kv = 1.0 / np.sqrt(d_kv)
    params.add(f"{prefix}.wq", rng.uniform(-bound_q, bound_q, size=(d_q, d_att)))
    params.add(f"{prefix}.wk", rng.uniform(-bound_kv, bound_kv, size=(d_kv, d_att)))
    params.add(f"{prefix}.wv", rng.uniform(-bound_kv, bound_kv, size=(d_kv, d_att)))


# ---------------------------------------------------------------------------
# Tape

class TVal:
    """A value on the tape; index -1 marks constants outside the graph."""

    __slots__ = ("data", "idx")

    def __init__(self, data: np.ndarray, idx: int):
        self.data = data
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape


class Tape:
    """Records fixed-block applications for one reverse sweep.

    With record=False the ops compute forward values only (inference mode).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: List[Tuple[int, Callable]] = []
        self._next = 0
        self._param_refs: Dict[int, str] = {}

    # -- plumbing ----------------------------------------------------------

    def _emit(self, data: np.ndarray, backward: Optional[Callable]) -> TVal:
        if not self.record or backward is None:
            return TVal(data, -1)
        idx = self._next
        self._next += 1
        self._nodes.append((idx, backward))
        return TVal(data, idx)

    def const(self, data) -> TVal:
        return TVal(np.asarray(data, dtype=np.float64), -1)

    def param(self, params: ParamSet, name: str) -> TVal:
        data = params.arrays[name]
        if not self.record:
            return TVal(data, -1)
        idx = self._next
        self._next += 1
        self._param_refs[idx] = name
        self._nodes.append((idx, None))
        return TVal(data, idx)

    def backward(self, loss: TVal) -> Dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss; returns grads keyed by param name."""
        if loss.data.shape != ():
            raise ValueError("backward expects a scalar loss")
        adj: Dict[int, np.ndarray] = {loss.idx: np.asarray(1.0)}
        grads: Dict[str, np.ndarray] = {}
        for idx, back in reversed(self._nodes):
            g = adj.pop(idx, None)
            if g is None:
                continue
            if back is None:  # parameter leaf
                name = self._param_refs[idx]
                if name in grads:
                    grads[name] = grads[name] + g
                else:
                    grads[name] = np.array(g, dtype=np.float64)
                continue
            for src_idx, contrib in back(g):
                if src_idx < 0:
                    continue
                if src_idx in adj:
                    adj[src_idx] = adj[src_idx] + contrib
                else:
                    adj[src_idx] = contrib
        return grads

    # -- blocks -------------------------------------------------------------

    def affine(self, x: TVal, w: TVal, b: TVal) -> TVal:
        """x @ w + b with b broadcast over leading axes."""
        out = x.data @ w.data + b.data

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            return [
                (x.idx, (g @ w.data.T).reshape(x.data.shape)),
                (w.idx, x2.T @ g2),
                (b.idx, g2.sum(axis=0)),
            ]

        return self._emit(out, back)

    def silu(self, x: TVal) -> TVal:
        sig = 1.0 / (1.0 + np.exp(-x.data))
        out = x.data * sig

        def back(g):
            return [(x.idx, g * (sig * (1.0 + x.data * (1.0 - sig))))]

        return self._emit(out, back)

    def sigmoid(self, x: TVal) -> TVal:
        out = 1.0 / (1.0 + np.exp(-x.data))

        def back(g):
            return [(x.idx, g * out * (1.0 - out))]

        return self._emit(out, back)

    def layer_norm(self, x: TVal, gain: TVal, bias: TVal, eps: float = 1e-6) -> TVal:
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gain.data + bias.data

        def back(g):
            n = x.data.shape[-1]
            gxhat = g * gain.data
            dx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            flat_axes = tuple(range(g.ndim - 1))
            return [
                (x.idx, dx),
                (gain.idx, (g * xhat).sum(axis=flat_axes)),
                (bias.idx, g.sum(axis=flat_axes)),
            ]

        return self._emit(out, back)

    def attention(self, q: TVal, k: TVal, v: TVal) -> TVal:
        """Single-head scaled dot-product attention.

        q: (B, d); k/v either (N, d)/(N, dv) shared across rows or
        (B, N, d)/(B, N, dv) per-row token sets. Softmax weights sumto 1.
        """
        if k.data.shape[0] == 0 or (k.data.ndim == 3 and k.data.shape[1] == 0):
            raise ValueError("attention over an empty token list")
        d = q.data.shape[-1]
        scale = 1.0 / np.sqrt(d)
        per_row = k.data.ndim == 3
        if per_row:
            scores = np.einsum("bd,bnd->bn", q.data, k.data) * scale
        else:
            scores = (q.data @ k.data.T) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        weights = expd / expd.sum(axis=-1, keepdims=True)
        if per_row:
            out = np.einsum("bn,bnd->bd", weights, v.data)
        else:
            out = weights @ v.data

        def back(g):
            if per_row:
                dw = np.einsum("bd,bnd->bn", g, v.data)
                dv = np.einsum("bn,bd->bnd", weights, g)
            else:
                dw = g @ v.data.T
                dv = weights.T @ g
            ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
            if per_row:
                dq = np.einsum("bn,bnd->bd", ds, k.data) * scale
                dk = np.einsum("bn,bd->bnd", ds, q.data) * scale
            else:
                dq = ds @ k.data * scale
                dk = ds.T @ q.data * scale
            return [(q.idx, dq), (k.idx, dk), (v.idx, dv)]

        return self._emit(out, back)

    def mse(self, a: TVal, b: TVal) -> TVal:
        diff = a.data - b.data
        out = np.asarray((diff ** 2).mean())

        def back(g):
            coeff = g * 2.0 / diff.size
            return [(a.idx, coeff * diff), (b.idx, -coeff * diff)]

        return self._emit(out, back)

    def log(self, x: TVal, eps: float = 1e-300) -> TVal:
        safe = np.maximum(x.data, eps)
        out = np.log(safe)

        def back(g):
            return [(x.idx, g / safe)]

        return self._emit(out, back)

    def clip_stopgrad(self, x: TVal, lo: float, hi: float) -> TVal:
        """Clamp values; gradient flows only where unclipped."""
        out = np.clip(x.data, lo, hi)
        inside = (x.data > lo) & (x.data < hi)

        def back(g):
            return [(x.idx, g * inside)]

        return self._emit(out, back)

    # -- arithmetic glue -----------------------------------------------------

    def add(self, a: TVal, b: TVal) -> TVal:
        if a.data.shape != b.data.shape:
            raise ValueError("add requires matching shapes")
        return self._emit(a.data + b.data,
                          lambda g: [(a.idx, g), (b.idx, g)])

    def sub(self, a: TVal, b: TVal) -> TVal:
        if a.data.shape != b.data.shape:
            raise ValueError("sub requires matching shapes")
        return self._emit(a.data - b.data,
                          lambda g: [(a.idx, g), (b.idx, -g)])

    def mul(self, a: TVal, b: TVal) -> TVal:
        if a.data.shape != b.data.shape:
            raise ValueError("mul requires matching shapes")
        return self._emit(a.data * b.data,
                          lambda g: [(a.idx, g * b.data), (b.idx, g * a.data)])

    def add_n(self, vals: Sequence[TVal]) -> TVal:
        data = vals[0].data
        for v in vals[1:]:
            data = data + v.data
        return self._emit(data, lambda g: [(v.idx, g) for v in vals])

    def scale(self, x: TVal, c: float) -> TVal:
        return self._emit(x.data * c, lambda g: [(x.idx, g * c)])

    def add_scalar(self, x: TVal, c: float) -> TVal:
        return self._emit(x.data + c, lambda g: [(x.idx, g)])

    def minimum(self, a: TVal, b: TVal) -> TVal:
        take_a = a.data <= b.data  # ties route through the first argument
        out = np.where(take_a, a.data, b.data)

        def back(g):
            return [(a.idx, g * take_a), (b.idx, g * ~take_a)]

        return self._emit(out, back)

    def concat(self, vals: Sequence[TVal], axis: int = -1) -> TVal:
        out = np.concatenate([v.data for v in vals], axis=axis)
        sizes = [v.data.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            parts = np.split(g, splits, axis=axis)
            return list(zip([v.idx for v in vals], parts))

        return self._emit(out, back)

    def stack_rows(self, vals: Sequence[TVal]) -> TVal:
        out = np.stack([v.data for v in vals], axis=0)

        def back(g):
            return [(v.idx, g[i]) for i, v in enumerate(vals)]

        return self._emit(out, back)

    def reshape(self, x: TVal, shape) -> TVal:
        orig = x.data.shape
        return self._emit(x.data.reshape(shape),
                          lambda g: [(x.idx, g.reshape(orig))])

    def pick(self, x: TVal, index: int) -> TVal:
        out = np.asarray(x.data[index])

        def back(g):
            full = np.zeros_like(x.data)
            full[index] = g
            return [(x.idx, full)]

        return self._emit(out, back)

    def mean_all(self, x: TVal) -> TVal:
        n = x.data.size
        return self._emit(np.asarray(x.data.mean()),
                          lambda g: [(x.idx, np.full(x.data.shape, g / n))])

    def sum_all(self, x: TVal) -> TVal:
        return self._emit(np.asarray(x.data.sum()),
                          lambda g: [(x.idx, np.full(x.data.shape, g))])

    def normalize_sum(self, x: TVal, floor: float = 1e-12) -> TVal:
        """x / sum(x); a uniform constant when the mass is below floor."""
        total = float(x.data.sum())
        if total < floor:
            n = x.data.size
            return self.const(np.full(n, 1.0 / n))
        out = x.data / total

        def back(g):
            return [(x.idx, g / total - np.dot(g, out) / total)]

        return self._emit(out, back)

    def entropy(self, p: TVal) -> TVal:
        """-sum p log p in nats with the 0 log 0 = 0 convention."""
        safe = np.maximum(p.data, 1e-300)
        out = np.asarray(-(p.data * np.log(safe)).sum())

        def back(g):
            return [(p.idx, -g * (np.log(safe) + 1.0))]

        return self._emit(out, back)


# ---------------------------------------------------------------------------
# Convenience composites

def apply_mlp(tape: Tape, params: ParamSet, prefix: str, x: TVal,
              n_layers: int) -> TVal:
    """affine -> SiLU -> ... -> affine over the named layer stack."""
    h = x
    for i in range(n_layers):
        w = tape.param(params, f"{prefix}.l{i}.w")
        b = tape.param(params, f"{prefix}.l{i}.b")
        h = tape.affine(h, w, b)
        if i < n_layers - 1:
            h = tape.silu(h)
    return h


def apply_attention(tape: Tape, params: ParamSet, prefix: str, query: TVal,
                    tokens: TVal) -> TVal:
    """Learned q/k/v projections around a single softmax attention head."""
    wq = tape.param(params, f"{prefix}.wq")
    wk = tape.param(params, f"{prefix}.wk")
    wv = tape.param(params, f"{prefix}.wv")
    q = _project(tape, query, wq)
    k = _project(tape, tokens, wk)
    v = _project(tape, tokens, wv)
    return tape.attention(q, k, v)


def _project(tape: Tape, tokens: TVal, w: TVal) -> TVal:
    out = tokens.data @ w.data
    if not tape.record:
        return TVal(out, -1)

    def back(g):
        t2 = tokens.data.reshape(-1, tokens.data.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return [(tokens.idx, g @ w.data.T), (w.idx, t2.T @ g2)]

    return tape._emit(out, back)


# ---------------------------------------------------------------------------
# Optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimizer_step(params: ParamSet, grads: Dict[str, np.ndarray], lr: float) -> None:
    """Adaptive-moment update with bias correction, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    params.step += 1
    t = params.step
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64).reshape(params.arrays[name].shape)
        params.m[name] = ADAM_BETA1 * params.m[name] + (1.0 - ADAM_BETA1) * g
        params.v[name] = ADAM_BETA2 * params.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = params.m[name] / (1.0 - ADAM_BETA1 ** t)
        v_hat = params.v[name] / (1.0 - ADAM_BETA2 ** t)
        params.arrays[name] = params.arrays[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Gradient check

def grad_check(params: ParamSet, loss_fn: Callable[[ParamSet], Tuple[float, Dict[str, np.ndarray]]],
               h: float = 1e-5, sample_frac: float = 0.01, min_sample: int = 50,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic grads and central differences.

    Checks a random subsample of parameter entries (at least min_sample or
    the whole set if smaller). The relative-error denominator is floored at
    1e-6 x the largest gradient entry so that parameters whose true gradient
    sits below the finite-difference noise floor do not register as errors;
    a genuinely wrong backward pass is off at the gradient's own scale and
    still trips the check.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_fn(params)
    entries = []
    gscale = 0.0
    for name in params.names():
        if name not in grads:
            continue
        gscale = max(gscale, float(np.max(np.abs(grads[name]))))
        for flat_idx in range(params.arrays[name].size):
            entries.append((name, flat_idx))
    if not entries:
        return 0.0
    floor = max(1e-8, 1e-6 * gscale)
    n_take = max(min_sample, int(len(entries) * sample_frac))
    n_take = min(n_take, len(entries))
    chosen = rng.choice(len(entries), size=n_take, replace=False)
    max_rel = 0.0
    for ci in chosen:
        name, flat = entries[int(ci)]
        arr = params.arrays[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        up, _ = loss_fn(params)
        arr.flat[flat] = orig - h
        down, _ = loss_fn(params)
        arr.flat[flat] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = np.asarray(grads[name]).reshape(arr.shape).flat[flat]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Checkpoint io: JSON header + little-endian float64 arrays in declared order

CKPT_MAGIC = "bevwarp-ckpt-v1"


def save_checkpoint(params: ParamSet, path) -> None:
    names = params.names()
    header = {
        "format": CKPT_MAGIC,
        "step": params.step,
        "meta": params.meta,
        "arrays": [{"name": n, "shape": list(params.arrays[n].shape)} for n in names],
    }
    blob = io.BytesIO()
    for n in names:
        for source in (params.arrays, params.m, params.v):
            blob.write(source[n].astype("<f8").tobytes())
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob.getvalue())


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        params = ParamSet(meta=header.get("meta", {}))
        params.step = int(header["step"])
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            chunks = []
            for _ in range(3):
                raw = fh.read(count * 8)
                chunks.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
            name = entry["name"]
            params.arrays[name] = chunks[0]
            params.m[name] = chunks[1]
            params.v[name] = chunks[2]
    return params
