"""Reverse-mode differentiation over the tensor kernels, on an explicit tape.

Every operation appends one node to a Tape: the recorded value, the input node
ids, a vjp closure for the backward sweep, and a forward closure so the tape
can be replayed bit-exactly. Gradients are evaluated by a single reverse pass
in strict reverse construction order, which makes two backward passes over the
same tape bit-identical.

`finite_diff_grad` is the independent central-difference oracle used to
certify `backward`; it never touches the tape.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor
from .tensor import DegenerateNormalizerError, Rng, add_macs, as_tensor, ensure_finite


class ParamSet(dict):
    """Named parameter map (name -> float64 array) with lexicographic iteration."""

    def names(self) -> list[str]:
        return sorted(dict.keys(self))

    def __iter__(self):
        return iter(self.names())

    def items(self):  # type: ignore[override]
        return [(k, self[k]) for k in self.names()]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in dict.items(self)})

    def total_size(self) -> int:
        return sum(v.size for v in dict.values(self))


class Node:
    __slots__ = ("op", "inputs", "value", "vjp", "fwd")

    def __init__(self, op, inputs, value, vjp, fwd):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.fwd = fwd


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # keep numpy from hijacking Var arithmetic

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, op={self.tape.nodes[self.index].op}, shape={self.shape})"


class Tape:
    """Ordered operation record; topological by construction."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def _push(self, op, inputs, value, vjp, fwd) -> Var:
        self.nodes.append(Node(op, tuple(inputs), value, vjp, fwd))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self._push("const", (), as_tensor(value), None, None)

    def leaf(self, value) -> Var:
        return self._push("leaf", (), as_tensor(value), None, None)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Bind a named parameter; repeated binds return the same node."""
        if name in self.params:
            return Var(self, self.params[name])
        var = self._push("param", (), as_tensor(value), None, None)
        self.params[name] = var.index
        return var

    def bind(self, params: ParamSet) -> dict[str, Var]:
        return {name: self.param(name, params[name]) for name in params}

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its recorded inputs (leaves reused as-is)."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                values.append(node.value)
            else:
                values.append(node.fwd(*[values[i] for i in node.inputs]))
        return values


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss node w.r.t. every bound parameter.

    Parameters with no path to the loss get exact zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out: dict[str, np.ndarray] = {}
    for name, idx in tape.params.items():
        g = grads[idx]
        out[name] = np.zeros_like(tape.nodes[idx].value) if g is None else g
    return out


def finite_diff_grad(
    f: Callable[[ParamSet], float],
    params: ParamSet,
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle: (f(p+h e) - f(p-h e)) / 2h per coordinate.

    Perturbs `params` in place and restores each coordinate exactly. Raises if
    f returns a non-finite value, naming the offending coordinate.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    grads: dict[str, np.ndarray] = {}
    for name in params:
        p = params[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    f"finite_diff_grad: f non-finite at {name}[{i}]"
                )
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1e-8); the grad-check metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


FD_NOISE_FLOOR = 1e-8


def compare_grads(
    got: dict[str, np.ndarray],
    want: dict[str, np.ndarray],
    atol: float = FD_NOISE_FLOOR,
) -> dict[str, float]:
    """Per-parameter worst relative error between two gradient maps.

    Differences at or below `atol` are treated as zero error: the central
    difference oracle carries ~|f|*eps/h round-off, so on structurally-zero
    gradients (e.g. softmax key biases, whose row-constant logit shift cancels)
    the oracle returns pure noise that says nothing about correctness.
    """
    report: dict[str, float] = {}
    for name in sorted(got):
        a = np.asarray(got[name])
        b = np.asarray(want[name])
        diff = np.abs(a - b)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        rel = np.where(diff <= atol, 0.0, rel)
        report[name] = float(rel.max()) if rel.size else 0.0
    return report


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def matmul(a: Var, b) -> Var:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    av, bv = a.value, b.value
    y = tensor.matmul(av, bv)

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._push("matmul", (a.index, b.index), y, vjp, tensor.matmul)


def add(a: Var, b) -> Var:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    y = ensure_finite(a.value + b.value, "add")
    return tape._push(
        "add", (a.index, b.index), y, lambda g: (g, g), lambda x, z: x + z
    )


def sub(a: Var, b) -> Var:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    y = ensure_finite(a.value - b.value, "sub")
    return tape._push(
        "sub", (a.index, b.index), y, lambda g: (g, -g), lambda x, z: x - z
    )


def mul(a: Var, b) -> Var:
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    add_macs(av.size)
    y = ensure_finite(av * bv, "mul")
    return tape._push(
        "mul", (a.index, b.index), y, lambda g: (g * bv, g * av), lambda x, z: x * z
    )


def scale(a: Var, c: float) -> Var:
    y = ensure_finite(a.value * c, "scale")
    return a.tape._push("scale", (a.index,), y, lambda g: (g * c,), lambda x: x * c)


def relu(a: Var) -> Var:
    av = a.value
    gate = av > 0
    return a.tape._push(
        "relu",
        (a.index,),
        np.where(gate, av, 0.0),
        lambda g: (g * gate,),
        lambda x: np.where(x > 0, x, 0.0),
    )


def transpose(a: Var) -> Var:
    return a.tape._push(
        "transpose",
        (a.index,),
        np.ascontiguousarray(a.value.T),
        lambda g: (np.ascontiguousarray(g.T),),
        lambda x: np.ascontiguousarray(x.T),
    )


def add_rowvec(x: Var, b: Var) -> Var:
    """x[N x d] + b[d] broadcast over rows (bias add)."""
    tape = _tape_of(x, b)
    x = _lift(tape, x)
    b = _lift(tape, b)
    if b.shape != (x.shape[-1],):
        raise ValueError(f"add_rowvec: bias shape {b.shape} vs input {x.shape}")
    y = ensure_finite(x.value + b.value, "add_rowvec")
    return tape._push(
        "add_rowvec",
        (x.index, b.index),
        y,
        lambda g: (g, g.sum(axis=0)),
        lambda xv, bv: xv + bv,
    )


def mul_colvec(x: Var, c: Var) -> Var:
    """x[N x d] * c[N x 1] broadcast over columns (per-row scaling)."""
    tape = _tape_of(x, c)
    x = _lift(tape, x)
    c = _lift(tape, c)
    if c.shape != (x.shape[0], 1):
        raise ValueError(f"mul_colvec: scale shape {c.shape} vs input {x.shape}")
    xv, cv = x.value, c.value
    add_macs(xv.size)
    y = ensure_finite(xv * cv, "mul_colvec")
    return tape._push(
        "mul_colvec",
        (x.index, c.index),
        y,
        lambda g: (g * cv, (g * xv).sum(axis=1, keepdims=True)),
        lambda a, b: a * b,
    )


def reciprocal(a: Var) -> Var:
    y = ensure_finite(1.0 / a.value, "reciprocal")
    return a.tape._push(
        "reciprocal", (a.index,), y, lambda g: (-g * y * y,), lambda x: 1.0 / x
    )


def sum_all(a: Var) -> Var:
    y = np.asarray(a.value.sum())
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return a.tape._push("sum_all", (a.index,), y, vjp, lambda x: np.asarray(x.sum()))


def softmax_rows(x: Var, mask: np.ndarray | None = None) -> Var:
    """Row softmax; mask is a constant additive matrix (0 or MASK_NEG)."""
    y = tensor.softmax_rows(x.value, mask)

    def vjp(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return x.tape._push(
        "softmax_rows", (x.index,), y, vjp, lambda v: tensor.softmax_rows(v, mask)
    )


def log_softmax_rows(x: Var) -> Var:
    xv = x.value
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = ensure_finite(shifted - lse, "log_softmax_rows")
    soft = np.exp(y)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    def fwd(v):
        s = v - v.max(axis=-1, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    return x.tape._push("log_softmax_rows", (x.index,), y, vjp, fwd)


def pick_per_row(x: Var, idx: np.ndarray) -> Var:
    """y[i] = x[i, idx[i]]; used to gather target log-probabilities."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.shape != (n,):
        raise ValueError(f"pick_per_row: index shape {idx.shape} vs {n} rows")
    rows = np.arange(n)
    y = x.value[rows, idx]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return x.tape._push(
        "pick_per_row", (x.index,), y, vjp, lambda v: v[rows, idx]
    )


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = tensor.LAYER_NORM_EPS) -> Var:
    tape = _tape_of(x, gamma, beta)
    x = _lift(tape, x)
    gamma = _lift(tape, gamma)
    beta = _lift(tape, beta)
    y = tensor.layer_norm(x.value, gamma.value, beta.value, eps)

    xv, gv = x.value, gamma.value
    centered = xv - xv.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return tape._push(
        "layer_norm",
        (x.index, gamma.index, beta.index),
        y,
        vjp,
        lambda xv_, gv_, bv_: tensor.layer_norm(xv_, gv_, bv_, eps),
    )


def grouped_max(x: Var, group: int) -> tuple[Var, np.ndarray]:
    """Stride pooling; the gradient flows only to each group's (tie-broken) winner."""
    y, arg = tensor.grouped_max(x.value, group)
    n, d = x.shape
    n_groups = n // group
    win_rows = np.arange(n_groups)[:, None] * group + arg
    cols = np.broadcast_to(np.arange(d), (n_groups, d))

    def vjp(g):
        dx = np.zeros((n, d))
        dx[win_rows, cols] = g
        return (dx,)

    var = x.tape._push(
        "grouped_max", (x.index,), y, vjp, lambda v: tensor.grouped_max(v, group)[0]
    )
    return var, arg


def take_rows(x: Var, idx: np.ndarray) -> Var:
    """Row gather (embedding lookup, permutation, block gather). Duplicates
    accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return x.tape._push(
        "take_rows", (x.index,), x.value[idx], vjp, lambda v: v[idx]
    )


def slice_rows(x: Var, start: int, stop: int) -> Var:
    shape = x.shape

    def vjp(g):
        dx = np.zeros(shape)
        dx[start:stop] = g
        return (dx,)

    return x.tape._push(
        "slice_rows", (x.index,), x.value[start:stop].copy(), vjp, lambda v: v[start:stop].copy()
    )


def slice_cols(x: Var, start: int, stop: int) -> Var:
    shape = x.shape

    def vjp(g):
        dx = np.zeros(shape)
        dx[:, start:stop] = g
        return (dx,)

    return x.tape._push(
        "slice_cols",
        (x.index,),
        np.ascontiguousarray(x.value[:, start:stop]),
        vjp,
        lambda v: np.ascontiguousarray(v[:, start:stop]),
    )


def concat_rows(parts: list[Var]) -> Var:
    if not parts:
        raise ValueError("concat_rows: empty input")
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.vsplit(g, splits))

    return tape._push(
        "concat_rows",
        tuple(p.index for p in parts),
        np.vstack([p.value for p in parts]),
        vjp,
        lambda *vals: np.vstack(vals),
    )


def concat_cols(parts: list[Var]) -> Var:
    if not parts:
        raise ValueError("concat_cols: empty input")
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.hsplit(g, splits))

    return tape._push(
        "concat_cols",
        tuple(p.index for p in parts),
        np.hstack([p.value for p in parts]),
        vjp,
        lambda *vals: np.hstack(vals),
    )


def dropout(x: Var, rate: float, rng: Rng) -> Var:
    """Inverted dropout with a deterministic mask drawn from `rng`."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.uniform(*x.shape) >= rate) / (1.0 - rate)
    add_macs(x.value.size)
    return x.tape._push(
        "dropout", (x.index,), x.value * keep, lambda g: (g * keep,), lambda v: v * keep
    )


def causal_kernel_attention(phi_q: Var, phi_k: Var, v: Var, eps: float = 1e-9) -> Var:
    """Prefix-sum kernel attention: row r mixes values at rows r' <= r.

    out_r = phi_q_r . S_r / (phi_q_r . z_r) with S_r = sum_{r'<=r} phi_k_{r'} v_{r'}^T
    and z_r the running sum of phi_k rows. Linear in sequence length in both
    the forward and backward sweeps; the M x M weight matrix is never formed.
    """
    tape = _tape_of(phi_q, phi_k, v)
    phi_q = _lift(tape, phi_q)
    phi_k = _lift(tape, phi_k)
    v = _lift(tape, v)
    fq, fk, vv = phi_q.value, phi_k.value, v.value
    m, dk = fq.shape
    dv = vv.shape[1]
    if fk.shape != (m, dk) or vv.shape[0] != m:
        raise ValueError(
            f"causal_kernel_attention shape mismatch: {fq.shape}, {fk.shape}, {vv.shape}"
        )

    def compute(fq_, fk_, vv_):
        prefix = np.cumsum(fk_[:, :, None] * vv_[:, None, :], axis=0)  # M x dk x dv
        z = np.cumsum(fk_, axis=0)
        num = np.einsum("mi,mij->mj", fq_, prefix)
        den = np.einsum("mi,mi->m", fq_, z)[:, None]
        if (den <= eps).any():
            row = int(np.argwhere(den[:, 0] <= eps)[0][0])
            raise DegenerateNormalizerError(f"degenerate kernel normalizer at row {row}")
        return prefix, z, num, den, ensure_finite(num / den, "causal_kernel_attention")

    prefix, z, num, den, out = compute(fq, fk, vv)
    # forward multiplies: outer products + two contractions + normalizer
    add_macs(2 * m * dk * dv + 2 * m * dk)

    def vjp(g):
        dnum = g / den
        dden = -(g * num).sum(axis=1, keepdims=True) / (den * den)
        dfq = np.einsum("mij,mj->mi", prefix, dnum) + dden * z
        dP = fq[:, :, None] * dnum[:, None, :]
        dE = np.flip(np.cumsum(np.flip(dP, 0), axis=0), 0)
        dfk = np.einsum("mij,mj->mi", dE, vv) + np.flip(
            np.cumsum(np.flip(dden * fq, 0), axis=0), 0
        )
        dv_ = np.einsum("mi,mij->mj", fk, dE)
        return dfq, dfk, dv_

    return tape._push(
        "causal_kernel_attention",
        (phi_q.index, phi_k.index, v.index),
        out,
        vjp,
        lambda a, b, c: compute(a, b, c)[4],
    )
