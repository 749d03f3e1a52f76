"""Dense float64 tensors with reverse-mode differentiation and Adam.

Define-by-run: every forward op appends a node to a Tape, and
``Tape.backward`` replays the nodes in exact reverse construction order.
Tapes are cheap and rebuilt for every forward pass; parameters are
long-lived leaf tensors that each new tape adopts on first use.

Everything is float64. There is no broadcasting beyond the row-vector
bias case in ``add`` (and the mirrored row-vector denominator in
``div``); anything else must be expanded explicitly, usually via a
matmul with a ones vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_TAPE_COUNTER = 0


class Tensor:
    """A dense array plus the bookkeeping that links it into a tape."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "tape_id", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.tape_id = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def leaf(data, requires_grad=True, name=None):
    """Create a leaf tensor (typically a trainable parameter)."""
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op, out, backward):
        self.op = op
        self.out = out
        self.backward = backward


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of primitive ops; backward visits them in reverse."""

    def __init__(self):
        global _TAPE_COUNTER
        _TAPE_COUNTER += 1
        self.id = _TAPE_COUNTER
        self.nodes: list[_Node] = []

    # -- tensor creation / adoption -------------------------------------

    def constant(self, data) -> Tensor:
        t = Tensor(data, requires_grad=False)
        t.tape_id = self.id
        return t

    def adopt(self, t: Tensor) -> Tensor:
        """Link a tensor into this tape, clearing any stale gradient.

        Leaves may migrate between tapes (parameters live across training
        steps); intermediates from another tape are a bug.
        """
        if t.tape_id == self.id:
            return t
        if not t.is_leaf:
            raise ValueError("tape: input tensor is an intermediate from another tape")
        t.tape_id = self.id
        t.grad = None
        return t

    def _record(self, op, out_data, needs_grad, backward) -> Tensor:
        out = Tensor(out_data, requires_grad=False)
        out.needs_grad = needs_grad
        out.tape_id = self.id
        out.is_leaf = False
        self.nodes.append(_Node(op, out, backward))
        return out

    def _bind(self, op, tensors):
        bound = []
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ValueError(f"{op}: inputs must be Tensors, got {type(t).__name__}")
            bound.append(self.adopt(t))
        return bound

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = self._bind("matmul", (a, b))
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
        out_data = a.data @ b.data

        def backward(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

        return self._record("matmul", out_data, a.needs_grad or b.needs_grad, backward)

    def add(self, a: Tensor, b) -> Tensor:
        """Elementwise add; b may be a same-shape tensor, a row-vector
        bias (1, m) against (n, m), or a python scalar constant."""
        if isinstance(b, (int, float)):
            (a,) = self._bind("add", (a,))
            s = float(b)

            def backward(g):
                _accum(a, g)

            return self._record("add", a.data + s, a.needs_grad, backward)

        a, b = self._bind("add", (a, b))
        row_bias = (
            a.data.ndim == 2
            and b.data.ndim == 2
            and b.data.shape == (1, a.data.shape[1])
            and a.data.shape[0] != 1
        )
        if a.data.shape != b.data.shape and not row_bias:
            raise ValueError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")
        out_data = a.data + b.data

        def backward(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0, keepdims=True) if row_bias else g)

        return self._record("add", out_data, a.needs_grad or b.needs_grad, backward)

    def mul(self, a: Tensor, b) -> Tensor:
        """Elementwise product; b may be a same-shape tensor or a scalar."""
        if isinstance(b, (int, float)):
            (a,) = self._bind("mul", (a,))
            s = float(b)

            def backward(g):
                _accum(a, g * s)

            return self._record("mul", a.data * s, a.needs_grad, backward)

        a, b = self._bind("mul", (a, b))
        if a.data.shape != b.data.shape:
            raise ValueError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")

        def backward(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return self._record("mul", a.data * b.data, a.needs_grad or b.needs_grad, backward)

    def div(self, a: Tensor, b) -> Tensor:
        """Elementwise quotient; b may be a same-shape tensor, a row
        vector (1, m) against (n, m), or a scalar."""
        if isinstance(b, (int, float)):
            (a,) = self._bind("div", (a,))
            s = float(b)

            def backward(g):
                _accum(a, g / s)

            return self._record("div", a.data / s, a.needs_grad, backward)

        a, b = self._bind("div", (a, b))
        row_den = (
            a.data.ndim == 2
            and b.data.ndim == 2
            and b.data.shape == (1, a.data.shape[1])
            and a.data.shape[0] != 1
        )
        if a.data.shape != b.data.shape and not row_den:
            raise ValueError(f"div: incompatible shapes {a.data.shape} / {b.data.shape}")
        out_data = a.data / b.data

        def backward(g):
            _accum(a, g / b.data)
            gb = -g * a.data / (b.data * b.data)
            _accum(b, gb.sum(axis=0, keepdims=True) if row_den else gb)

        return self._record("div", out_data, a.needs_grad or b.needs_grad, backward)

    def relu(self, x: Tensor) -> Tensor:
        (x,) = self._bind("relu", (x,))
        mask = x.data > 0

        def backward(g):
            _accum(x, g * mask)

        return self._record("relu", np.where(mask, x.data, 0.0), x.needs_grad, backward)

    def leaky(self, x: Tensor, slope: float = 0.2) -> Tensor:
        (x,) = self._bind("leaky", (x,))
        mask = x.data > 0

        def backward(g):
            _accum(x, g * np.where(mask, 1.0, slope))

        return self._record("leaky", np.where(mask, x.data, slope * x.data), x.needs_grad, backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        (x,) = self._bind("sigmoid", (x,))
        out_data = 1.0 / (1.0 + np.exp(-x.data))

        def backward(g):
            _accum(x, g * out_data * (1.0 - out_data))

        return self._record("sigmoid", out_data, x.needs_grad, backward)

    def softmax_rows(self, x: Tensor) -> Tensor:
        """Row-wise softmax of a 2-D tensor (max-shifted for stability)."""
        (x,) = self._bind("softmax_rows", (x,))
        if x.data.ndim != 2:
            raise ValueError(f"softmax_rows: expected 2-D input, got shape {x.data.shape}")
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            inner = (g * out_data).sum(axis=1, keepdims=True)
            _accum(x, out_data * (g - inner))

        return self._record("softmax_rows", out_data, x.needs_grad, backward)

    def exp(self, x: Tensor) -> Tensor:
        (x,) = self._bind("exp", (x,))
        out_data = np.exp(x.data)

        def backward(g):
            _accum(x, g * out_data)

        return self._record("exp", out_data, x.needs_grad, backward)

    def log(self, x: Tensor) -> Tensor:
        (x,) = self._bind("log", (x,))
        if np.any(x.data <= 0):
            raise ValueError("log: input must be strictly positive")

        def backward(g):
            _accum(x, g / x.data)

        return self._record("log", np.log(x.data), x.needs_grad, backward)

    def sqrt(self, x: Tensor) -> Tensor:
        (x,) = self._bind("sqrt", (x,))
        if np.any(x.data < 0):
            raise ValueError("sqrt: input must be nonnegative")
        out_data = np.sqrt(x.data)

        def backward(g):
            # 1e-300 floor: zero upstream grad at y=0 stays 0 instead of 0/0.
            _accum(x, g / (2.0 * np.maximum(out_data, 1e-300)))

        return self._record("sqrt", out_data, x.needs_grad, backward)

    def abs(self, x: Tensor) -> Tensor:
        (x,) = self._bind("abs", (x,))
        sign = np.sign(x.data)

        def backward(g):
            _accum(x, g * sign)

        return self._record("abs", np.abs(x.data), x.needs_grad, backward)

    def concat(self, parts, axis: int = 0) -> Tensor:
        parts = self._bind("concat", tuple(parts))
        if not parts:
            raise ValueError("concat: need at least one input")
        if axis not in (0, 1):
            raise ValueError(f"concat: axis must be 0 or 1, got {axis}")
        out_data = np.concatenate([p.data for p in parts], axis=axis)
        offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, g[lo:hi] if axis == 0 else g[:, lo:hi])

        return self._record("concat", out_data, any(p.needs_grad for p in parts), backward)

    def slice(self, x: Tensor, rows=None, cols=None) -> Tensor:
        """Contiguous 2-D slice; rows/cols are (start, stop) or None."""
        (x,) = self._bind("slice", (x,))
        if x.data.ndim != 2:
            raise ValueError(f"slice: expected 2-D input, got shape {x.data.shape}")
        r0, r1 = rows if rows is not None else (0, x.data.shape[0])
        c0, c1 = cols if cols is not None else (0, x.data.shape[1])
        out_data = x.data[r0:r1, c0:c1].copy()

        def backward(g):
            if x.needs_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[r0:r1, c0:c1] += g

        return self._record("slice", out_data, x.needs_grad, backward)

    def transpose(self, x: Tensor) -> Tensor:
        """2-D transpose.

        Equivalent to slicing out every (1,1) cell and re-concatenating, but
        as one node; used to turn column vectors into broadcastable rows.
        """
        (x,) = self._bind("transpose", (x,))
        if x.data.ndim != 2:
            raise ValueError(f"transpose: expected 2-D input, got shape {x.data.shape}")

        def backward(g):
            _accum(x, g.T)

        return self._record("transpose", x.data.T.copy(), x.needs_grad, backward)

    def sum(self, x: Tensor) -> Tensor:
        (x,) = self._bind("sum", (x,))

        def backward(g):
            _accum(x, np.full_like(x.data, np.asarray(g).item()))

        return self._record("sum", np.array([[x.data.sum()]]), x.needs_grad, backward)

    def mean(self, x: Tensor) -> Tensor:
        (x,) = self._bind("mean", (x,))
        n = x.data.size

        def backward(g):
            _accum(x, np.full_like(x.data, np.asarray(g).item() / n))

        return self._record("mean", np.array([[x.data.mean()]]), x.needs_grad, backward)

    # -- composites ------------------------------------------------------

    def neg(self, x: Tensor) -> Tensor:
        return self.mul(x, -1.0)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.mul(b, -1.0))

    def softplus(self, x: Tensor) -> Tensor:
        """log(1 + exp(x)), computed overflow-free as relu(x) + log(1 + exp(-|x|))."""
        return self.add(self.relu(x), self.log(self.add(self.exp(self.neg(self.abs(x))), 1.0)))

    # -- backward --------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every reachable tensor that needs one."""
        if loss.tape_id != self.id:
            raise ValueError("backward: loss does not belong to this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar-shaped, got {loss.data.shape}")
        if not self.nodes:
            raise ValueError("backward: tape is empty")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.out.grad is not None and node.out.needs_grad:
                node.backward(node.out.grad)


_OPS = {
    "matmul": Tape.matmul,
    "add": Tape.add,
    "mul": Tape.mul,
    "div": Tape.div,
    "relu": Tape.relu,
    "leaky": Tape.leaky,
    "sigmoid": Tape.sigmoid,
    "softmax_rows": Tape.softmax_rows,
    "softmax-per-row": Tape.softmax_rows,
    "exp": Tape.exp,
    "log": Tape.log,
    "sqrt": Tape.sqrt,
    "abs": Tape.abs,
    "concat": Tape.concat,
    "slice": Tape.slice,
    "transpose": Tape.transpose,
    "sum": Tape.sum,
    "mean": Tape.mean,
}


def forward(tape: Tape, op: str, *inputs, **kwargs) -> Tensor:
    """Generic dispatch into the primitive set, by op name."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"forward: unknown op {op!r}") from None
    return fn(tape, *inputs, **kwargs)


# -- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    """Standard Adam with bias correction; moments keyed by parameter name."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update, in place, for every parameter in ``params``.

    Every parameter must carry a gradient from a preceding backward();
    parameters whose subgraph was skipped this step should simply not be
    passed in.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- checkpoint i/o ---------------------------------------------------------

# Floats are written with 17 significant digits so that load() restores
# bit-identical values; json.dumps would round-trip too but does not give
# a fixed textual format.


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(path, params: dict[str, Tensor], config: dict | None = None) -> None:
    """Write parameters (and an optional config echo) as a single JSON document."""
    chunks = ["{\n"]
    if config is not None:
        chunks.append('  "config": ')
        chunks.append(json.dumps(config, sort_keys=True, separators=(", ", ": ")))
        chunks.append(",\n")
    chunks.append('  "params": {\n')
    names = sorted(params)
    for i, name in enumerate(names):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        shape = json.dumps(list(arr.shape))
        data = ", ".join(_fmt(v) for v in arr.ravel())
        sep = "," if i < len(names) - 1 else ""
        chunks.append(f'    {json.dumps(name)}: {{"shape": {shape}, "data": [{data}]}}{sep}\n')
    chunks.append("  }\n}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a checkpoint back into name -> float64 array, plus the config echo."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, doc.get("config")
