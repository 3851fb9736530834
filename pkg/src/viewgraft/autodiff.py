"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Everything downstream (losses, the renderer refinement, the warps) is built
from the op set in this module. Ops record onto an explicit Tape; backward
walks the tape once and returns gradients for every named leaf. The same
recorded graph can be re-evaluated with perturbed leaf values
(Tape.forward_eval), which is what the finite-difference checker uses, so
gradient verification never trusts the adjoint code it is checking.

Conventions that matter for the rest of the package:

- all values are float64 ndarrays; python floats are lifted to 0-d arrays
- binary ops broadcast only scalar-vs-array (never general broadcasting)
- subgradients at kinks: abs'(0) = 0, sqrt'(0) = 0, clamp passes gradient
  on the boundary
- adjoints are NaN-safe: wherever the local derivative is singular, a zero
  incoming gradient produces a zero outgoing gradient (masked-out pixels
  carry finite garbage values and zero adjoint weight, never NaN)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "DomainError",
    "masked_mean",
    "clamp",
    "arccos",
    "rot_coeff_a",
    "rot_coeff_b",
    "dot",
    "bilinear_sample",
    "cdiff_x",
    "cdiff_y",
    "finite_diff_check",
    "FdReport",
]


class DomainError(ValueError):
    """Raised when an op is evaluated outside its domain (log/sqrt)."""


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class _Node:
    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op, inputs, value, aux):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


class Tensor:
    """Handle to one node of a Tape. Holds no data of its own."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.tape.nodes[self.idx].value.shape

    @property
    def size(self):
        return self.tape.nodes[self.idx].value.size

    def item(self) -> float:
        return float(self.tape.nodes[self.idx].value)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("tensors belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape._record("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self.tape._record("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        return self.tape._record("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        return self.tape._record("div", (self, self._lift(other)))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self.tape._record("neg", (self,))

    def __getitem__(self, key):
        return self.tape._record("index", (self,), aux=key)

    def sum(self):
        return self.tape._record("sum", (self,))

    def mean(self):
        return self.tape._record("mean", (self,))

    def abs(self):
        return self.tape._record("abs", (self,))

    def log(self):
        return self.tape._record("log", (self,))

    def exp(self):
        return self.tape._record("exp", (self,))

    def sqrt(self):
        return self.tape._record("sqrt", (self,))

    def reshape(self, shape):
        return self.tape._record("reshape", (self,), aux=tuple(shape))

    def __repr__(self):
        v = self.value
        return f"Tensor(op={self.tape.nodes[self.idx].op!r}, shape={v.shape})"


def _check_binary_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape}; "
                     "only scalar broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    # target was a scalar participating in a broadcast
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# forward implementations, keyed by op name
# (pure functions of input values + static aux, so replay is trivial)

def _fw_bilinear(grid, qx, qy, fill):
    H, W = grid.shape
    inb = (qx >= 0.0) & (qx <= W - 1.0) & (qy >= 0.0) & (qy <= H - 1.0)
    x = np.clip(qx, 0.0, W - 1.0)
    y = np.clip(qy, 0.0, H - 1.0)
    x0 = np.minimum(x.astype(np.int64), W - 2)
    y0 = np.minimum(y.astype(np.int64), H - 2)
    fx = x - x0
    fy = y - y0
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    v = (1.0 - fy) * ((1.0 - fx) * g00 + fx * g01) \
        + fy * ((1.0 - fx) * g10 + fx * g11)
    if not inb.all():
        v = np.where(inb, v, fill)
    return v, (inb, x0, y0, fx, fy, g00, g01, g10, g11)


def _forward(op, vals, aux):
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "sum":
        return np.sum(vals[0]).reshape(())
    if op == "mean":
        return np.mean(vals[0]).reshape(())
    if op == "masked_mean":
        mask, denom = aux
        return (np.sum(vals[0] * mask) / denom).reshape(())
    if op == "abs":
        return np.abs(vals[0])
    if op == "log":
        x = vals[0]
        if np.any(x <= 0.0):
            raise DomainError("log of non-positive value")
        return np.log(x)
    if op == "exp":
        return np.exp(vals[0])
    if op == "sqrt":
        x = vals[0]
        if np.any(x < 0.0):
            raise DomainError("sqrt of negative value")
        return np.sqrt(x)
    if op == "clamp":
        lo, hi = aux
        return np.clip(vals[0], lo, hi)
    if op == "arccos":
        return np.arccos(np.clip(vals[0], -1.0, 1.0))
    if op == "rot_a":
        s = vals[0]
        t = np.sqrt(np.maximum(s, 0.0))
        small = s < 1e-8
        return np.where(small, 1.0 - s / 6.0 + s * s / 120.0,
                        np.sin(t) / np.where(small, 1.0, t))
    if op == "rot_b":
        s = vals[0]
        t = np.sqrt(np.maximum(s, 0.0))
        small = s < 1e-8
        b = np.where(small, 0.5 - s / 24.0 + s * s / 720.0,
                     (1.0 - np.cos(t)) / np.where(small, 1.0, s))
        return b
    if op == "dot":
        return np.sum(vals[0] * vals[1]).reshape(())
    if op == "index":
        # np.array (not ascontiguousarray) so 0-d results stay 0-d
        return np.array(vals[0][aux], dtype=np.float64)
    if op == "reshape":
        return np.array(vals[0].reshape(aux), dtype=np.float64)
    if op == "cdiff_x":
        x = vals[0]
        out = np.empty_like(x)
        out[:, 1:-1] = x[:, 2:] - x[:, :-2]
        out[:, 0] = x[:, 1] - x[:, 0]
        out[:, -1] = x[:, -1] - x[:, -2]
        return out
    if op == "cdiff_y":
        x = vals[0]
        out = np.empty_like(x)
        out[1:-1, :] = x[2:, :] - x[:-2, :]
        out[0, :] = x[1, :] - x[0, :]
        out[-1, :] = x[-1, :] - x[-2, :]
        return out
    if op == "bilinear":
        v, _ = _fw_bilinear(vals[0], vals[1], vals[2], aux)
        return v
    raise KeyError(f"unknown op {op!r}")


def _safe_div(num, den):
    """num/den with 0/0 -> 0 (used by singular adjoints)."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=(den != 0.0) & (num != 0.0))
    return out


def _backward(op, vals, aux, out_val, g):
    """Returns per-input gradients (None for non-differentiable inputs)."""
    if op == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if op == "sub":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
    if op == "mul":
        return (_unbroadcast(g * vals[1], vals[0].shape),
                _unbroadcast(g * vals[0], vals[1].shape))
    if op == "div":
        a, b = vals
        ga = _unbroadcast(g / b, a.shape)
        gb = _unbroadcast(-g * out_val / b, b.shape)
        return (ga, gb)
    if op == "neg":
        return (-g,)
    if op == "sum":
        return (np.broadcast_to(g, vals[0].shape).copy(),)
    if op == "mean":
        return (np.broadcast_to(g / vals[0].size, vals[0].shape).copy(),)
    if op == "masked_mean":
        mask, denom = aux
        return (g * (mask / denom),)
    if op == "abs":
        return (g * np.sign(vals[0]),)
    if op == "log":
        return (g / vals[0],)
    if op == "exp":
        return (g * out_val,)
    if op == "sqrt":
        # subgradient 0 at x == 0, and never 0 * inf
        return (_safe_div(g, 2.0 * out_val),)
    if op == "clamp":
        lo, hi = aux
        x = vals[0]
        m = np.ones_like(x)
        if lo is not None:
            m = m * (x >= lo)
        if hi is not None:
            m = m * (x <= hi)
        return (g * m,)
    if op == "arccos":
        x = np.clip(vals[0], -1.0, 1.0)
        den = np.sqrt(np.maximum(1.0 - x * x, 1e-12))
        return (_safe_div(-g, den),)
    if op == "rot_a":
        s = vals[0]
        small = s < 1e-8
        t = np.sqrt(np.where(small, 1.0, s))
        d_big = (t * np.cos(t) - np.sin(t)) / (2.0 * t ** 3)
        d_small = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
        return (g * np.where(small, d_small, d_big),)
    if op == "rot_b":
        s = vals[0]
        small = s < 1e-8
        t = np.sqrt(np.where(small, 1.0, s))
        d_big = (t * np.sin(t) - 2.0 + 2.0 * np.cos(t)) / (2.0 * np.where(small, 1.0, s) ** 2)
        d_small = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
        return (g * np.where(small, d_small, d_big),)
    if op == "dot":
        return (g * vals[1], g * vals[0])
    if op == "index":
        z = np.zeros_like(vals[0])
        z[aux] += g
        return (z,)
    if op == "reshape":
        return (np.ascontiguousarray(g.reshape(vals[0].shape)),)
    if op == "cdiff_x":
        adj = np.zeros_like(vals[0])
        adj[:, 2:] += g[:, 1:-1]
        adj[:, :-2] -= g[:, 1:-1]
        adj[:, 1] += g[:, 0]
        adj[:, 0] -= g[:, 0]
        adj[:, -1] += g[:, -1]
        adj[:, -2] -= g[:, -1]
        return (adj,)
    if op == "cdiff_y":
        adj = np.zeros_like(vals[0])
        adj[2:, :] += g[1:-1, :]
        adj[:-2, :] -= g[1:-1, :]
        adj[1, :] += g[0, :]
        adj[0, :] -= g[0, :]
        adj[-1, :] += g[-1, :]
        adj[-2, :] -= g[-1, :]
        return (adj,)
    if op == "bilinear":
        grid, qx, qy = vals
        _, (inb, x0, y0, fx, fy, g00, g01, g10, g11) = _fw_bilinear(grid, qx, qy, aux)
        gm = g * inb
        g_grid = np.zeros_like(grid)
        np.add.at(g_grid, (y0, x0), gm * (1.0 - fy) * (1.0 - fx))
        np.add.at(g_grid, (y0, x0 + 1), gm * (1.0 - fy) * fx)
        np.add.at(g_grid, (y0 + 1, x0), gm * fy * (1.0 - fx))
        np.add.at(g_grid, (y0 + 1, x0 + 1), gm * fy * fx)
        d_dx = (1.0 - fy) * (g01 - g00) + fy * (g11 - g10)
        d_dy = (1.0 - fx) * (g10 - g00) + fx * (g11 - g01)
        return (g_grid, gm * d_dx, gm * d_dy)
    raise KeyError(f"unknown op {op!r}")


class Tape:
    """Append-only op record. One tape per evaluated expression/step."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._vars: dict[str, int] = {}

    def variable(self, name: str, value) -> Tensor:
        if name in self._vars:
            raise ValueError(f"duplicate variable name {name!r}")
        v = _as_f64(value).copy()
        self.nodes.append(_Node("var", (), v, name))
        self._vars[name] = len(self.nodes) - 1
        return Tensor(self, len(self.nodes) - 1)

    def constant(self, value) -> Tensor:
        self.nodes.append(_Node("const", (), _as_f64(value), None))
        return Tensor(self, len(self.nodes) - 1)

    def _record(self, op, inputs, aux=None) -> Tensor:
        vals = tuple(self.nodes[t.idx].value for t in inputs)
        if op in ("add", "sub", "mul", "div"):
            _check_binary_shapes(vals[0], vals[1])
        if op == "masked_mean":
            mask = aux
            if mask.shape != vals[0].shape:
                raise ValueError("mask shape must match input shape")
            denom = float(np.sum(mask))
            if denom <= 0.0:
                raise ValueError("masked_mean over an empty mask")
            aux = (mask, denom)
        value = _forward(op, vals, aux)
        self.nodes.append(_Node(op, tuple(t.idx for t in inputs), value, aux))
        return Tensor(self, len(self.nodes) - 1)

    @property
    def variables(self) -> dict[str, int]:
        return dict(self._vars)

    def forward_eval(self, values: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-evaluate the recorded graph, optionally with new leaf values.

        With values=None this replays the tape verbatim and must reproduce
        every recorded node value bit-exactly. Returns the full node-value
        list so callers can read off any intermediate.
        """
        out: list[np.ndarray] = [None] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if n.op == "var":
                if values is not None and n.aux in values:
                    v = _as_f64(values[n.aux])
                    if v.shape != n.value.shape:
                        raise ValueError(f"variable {n.aux!r} shape changed")
                    out[i] = v
                else:
                    out[i] = n.value
            elif n.op == "const":
                out[i] = n.value
            else:
                out[i] = _forward(n.op, tuple(out[j] for j in n.inputs), n.aux)
        return out

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar root; gradients for every variable.

        Variables the root does not depend on get zero gradients (same
        shape as the leaf).
        """
        if root.tape is not self:
            raise ValueError("root tensor is not on this tape")
        if root.size != 1:
            raise ValueError("backward root must be a scalar")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[root.idx] = np.ones_like(self.nodes[root.idx].value)
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            n = self.nodes[i]
            if n.op in ("var", "const"):
                continue
            vals = tuple(self.nodes[j].value for j in n.inputs)
            gins = _backward(n.op, vals, n.aux, n.value, g)
            for j, gj in zip(n.inputs, gins):
                if gj is None:
                    continue
                # no in-place mutation of adjoint arrays anywhere, so
                # storing a view here is safe
                adj[j] = gj if adj[j] is None else adj[j] + gj
        out = {}
        for name, i in self._vars.items():
            out[name] = adj[i] if adj[i] is not None else np.zeros_like(self.nodes[i].value)
        return out


# ---------------------------------------------------------------------------
# free functions for ops that don't read naturally as methods

def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over mask > 0 pixels: sum(x * mask) / sum(mask).

    mask is a constant weight array (not differentiated). Empty mask is a
    caller bug and raises.
    """
    return x.tape._record("masked_mean", (x,), aux=_as_f64(mask))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    return x.tape._record("clamp", (x,), aux=(lo, hi))


def arccos(x: Tensor) -> Tensor:
    """arccos with input clipped to [-1, 1]; adjoint guarded near the ends."""
    return x.tape._record("arccos", (x,))


def rot_coeff_a(s: Tensor) -> Tensor:
    """sin(sqrt(s)) / sqrt(s) as a smooth function of s = angle^2."""
    return s.tape._record("rot_a", (s,))


def rot_coeff_b(s: Tensor) -> Tensor:
    """(1 - cos(sqrt(s))) / s as a smooth function of s = angle^2."""
    return s.tape._record("rot_b", (s,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError("dot operands must share a shape")
    return a.tape._record("dot", (a, b))


def bilinear_sample(grid: Tensor, qx, qy, fill: float = 0.0) -> Tensor:
    """Bilinear interpolation of a 2-D grid at continuous (qx, qy).

    Differentiable w.r.t. the grid and the query coordinates. Queries are in
    grid index units (x along columns, y along rows). Out-of-range queries
    produce `fill` and are excluded from the adjoint. Queries may be Tensors
    or constant arrays.
    """
    tape = grid.tape
    if grid.value.ndim != 2 or min(grid.shape) < 2:
        raise ValueError("grid must be 2-D with at least 2 samples per axis")
    if not isinstance(qx, Tensor):
        qx = tape.constant(qx)
    if not isinstance(qy, Tensor):
        qy = tape.constant(qy)
    if qx.shape != qy.shape:
        raise ValueError("query coordinate shapes differ")
    return tape._record("bilinear", (grid, qx, qy), aux=float(fill))


def cdiff_x(x: Tensor) -> Tensor:
    """Central difference along columns; one-sided at the borders."""
    if x.value.ndim != 2 or x.shape[1] < 2:
        raise ValueError("cdiff_x needs a 2-D map with >= 2 columns")
    return x.tape._record("cdiff_x", (x,))


def cdiff_y(x: Tensor) -> Tensor:
    """Central difference along rows; one-sided at the borders."""
    if x.value.ndim != 2 or x.shape[0] < 2:
        raise ValueError("cdiff_y needs a 2-D map with >= 2 rows")
    return x.tape._record("cdiff_y", (x,))


# ---------------------------------------------------------------------------
# finite-difference gradient verification

@dataclass
class FdReport:
    passed: bool
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    step: float = 1e-6
    tolerance: float = 1e-3


def finite_diff_check(fn, inputs: dict, step: float = 1e-6,
                      tolerance: float = 1e-3, max_entries: int = 64,
                      rng: np.random.Generator | None = None) -> FdReport:
    """Compare reverse-mode gradients of fn against central differences.

    fn takes {name: Tensor} and returns a scalar Tensor; inputs supplies the
    leaf values. The expression is recorded once; finite differences
    re-evaluate the same recorded graph with perturbed leaves, so agreement
    actually validates the adjoints. Parameters with more than `max_entries`
    elements are probed along that many random coordinates (seeded rng for
    reproducibility). A parameter entry passes when
    |ad - fd| <= tolerance * max(|ad|, |fd|) + 1e-8.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tape = Tape()
    tensors = {k: tape.variable(k, v) for k, v in inputs.items()}
    root = fn(tensors)
    if root.size != 1:
        raise ValueError("finite_diff_check expression must be scalar")
    grads = tape.backward(root)
    base = {k: _as_f64(v).copy() for k, v in inputs.items()}

    def eval_at(vals):
        return float(tape.forward_eval(vals)[root.idx])

    per_param = {}
    worst = 0.0
    ok = True
    for name in sorted(base):
        x = base[name]
        ad = grads[name]
        flat = x.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
            idxs.sort()
        pmax = 0.0
        for j in idxs:
            xp = {k: v for k, v in base.items()}
            bumped = flat.copy()
            bumped[j] += step
            xp[name] = bumped.reshape(x.shape)
            fp = eval_at(xp)
            bumped = flat.copy()
            bumped[j] -= step
            xp[name] = bumped.reshape(x.shape)
            fm = eval_at(xp)
            fd = (fp - fm) / (2.0 * step)
            a = float(ad.reshape(-1)[j])
            err = abs(a - fd)
            lim = tolerance * max(abs(a), abs(fd)) + 1e-8
            rel = err / (max(abs(a), abs(fd)) + 1e-8)
            pmax = max(pmax, rel)
            if err > lim:
                ok = False
        per_param[name] = pmax
        worst = max(worst, pmax)
    return FdReport(passed=ok, max_rel_err=worst, per_param=per_param,
                    step=step, tolerance=tolerance)
