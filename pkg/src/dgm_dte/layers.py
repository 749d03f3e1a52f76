"""Differentiable layers: graph attention, graph convolution, embedding
normalisation, three-token fusion attention, and plain dense stacks.

Every layer owns its parameter leaves (created once, adopted by each step's
fresh tape) and exposes them through ``params()`` as a flat name -> Tensor
mapping for the optimiser and checkpointing.
"""

from __future__ import annotations

import numpy as np

from .graphs import Graph
from .numerics import Tape, Tensor, leaf

OFF_EDGE = -1e30


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def apply_activation(tape: Tape, x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return tape.relu(x)
    if kind == "sigmoid":
        return tape.sigmoid(x)
    if kind == "leaky":
        return tape.leaky(x, 0.2)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


class Dense:
    """Affine map with a row-vector bias."""

    def __init__(self, rng, in_dim: int, out_dim: int, name: str):
        self.name = name
        self.W = leaf(glorot(rng, in_dim, out_dim), name=f"{name}.W")
        self.b = leaf(np.zeros((1, out_dim)), name=f"{name}.b")

    def params(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        return tape.add(tape.matmul(x, self.W), self.b)


class MLP:
    """Dense stack with a fixed hidden activation and a linear final layer."""

    def __init__(self, rng, dims: list[int], name: str, activation: str = "relu"):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.activation = activation
        self.layers = [
            Dense(rng, dims[i], dims[i + 1], name=f"{name}.{i}") for i in range(len(dims) - 1)
        ]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer.forward(tape, x)
            if i < len(self.layers) - 1:
                x = apply_activation(tape, x, self.activation)
        return x


class GATLayer:
    """Multi-head graph attention with a weight matrix shared across heads.

    Per head k the raw attention logit between nodes i and j is
    a_src_k . (W h_i) + a_dst_k . (W h_j) + b_k, passed through a leaky
    rectifier, optionally shifted by a distance penalty, masked to the edge
    set (self-edges allowed), and row-softmaxed.  Head outputs are averaged,
    then the output activation is applied.
    """

    def __init__(
        self,
        rng,
        in_dim: int,
        out_dim: int,
        heads: int = 2,
        slope: float = 0.2,
        activation: str = "relu",
        use_dist_bias: bool = False,
        name: str = "gat",
    ):
        self.heads = heads
        self.slope = slope
        self.activation = activation
        self.use_dist_bias = use_dist_bias
        self.W = leaf(glorot(rng, in_dim, out_dim), name=f"{name}.W")
        self.a_src = [
            leaf(glorot(rng, out_dim, 1), name=f"{name}.h{k}.a_src") for k in range(heads)
        ]
        self.a_dst = [
            leaf(glorot(rng, out_dim, 1), name=f"{name}.h{k}.a_dst") for k in range(heads)
        ]
        self.b = [leaf(np.zeros((1, 1)), name=f"{name}.h{k}.b") for k in range(heads)]

    def params(self) -> dict[str, Tensor]:
        out = {self.W.name: self.W}
        for t in (*self.a_src, *self.a_dst, *self.b):
            out[t.name] = t
        return out

    def forward(self, tape: Tape, h: Tensor, graph: Graph, attn_out: list | None = None) -> Tensor:
        """Attend over graph edges; ``attn_out`` collects each head's raw
        attention matrix (forward values only) when a list is supplied."""
        n = graph.n_nodes
        if h.shape[0] != n:
            raise ValueError(f"gat: {h.shape[0]} feature rows for a {n}-node graph")
        allowed = graph.adjacency + np.eye(n)
        mask = tape.constant(np.where(allowed > 0, 0.0, OFF_EDGE))
        ones_col = tape.constant(np.ones((n, 1)))
        ones_row = tape.constant(np.ones((1, n)))
        dist_bias = None
        if self.use_dist_bias:
            if graph.weights is None:
                raise ValueError("gat: distance bias requested but the graph has no weights")
            edge_w = graph.weights[graph.adjacency > 0]
            scale = edge_w.mean() if edge_w.size else 1.0
            dist_bias = tape.constant(-graph.weights / scale)

        hw = tape.matmul(h, self.W)
        acc = None
        for k in range(self.heads):
            src = tape.matmul(tape.matmul(hw, self.a_src[k]), ones_row)
            dst = tape.matmul(ones_col, tape.transpose(tape.matmul(hw, self.a_dst[k])))
            raw = tape.add(tape.add(src, dst), tape.matmul(self.b[k], ones_row))
            scores = tape.leaky(raw, self.slope)
            if dist_bias is not None:
                scores = tape.add(scores, dist_bias)
            alpha = tape.softmax_rows(tape.add(scores, mask))
            if attn_out is not None:
                attn_out.append(alpha.data.copy())
            head_out = tape.matmul(alpha, hw)
            acc = head_out if acc is None else tape.add(acc, head_out)
        avg = tape.mul(acc, 1.0 / self.heads)
        return apply_activation(tape, avg, self.activation)


def gcn_propagation(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric-normalised propagation matrix with self-loops added."""
    a_tilde = adjacency + np.eye(adjacency.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


class GCNLayer:
    """Graph convolution against a fixed propagation matrix."""

    def __init__(self, rng, in_dim: int, out_dim: int, activation: str = "relu", name: str = "gcn"):
        self.activation = activation
        self.W = leaf(glorot(rng, in_dim, out_dim), name=f"{name}.W")

    def params(self) -> dict[str, Tensor]:
        return {self.W.name: self.W}

    def forward(self, tape: Tape, e: Tensor, prop: np.ndarray) -> Tensor:
        out = tape.matmul(tape.matmul(tape.constant(prop), e), self.W)
        return apply_activation(tape, out, self.activation)


def normalize_columns(tape: Tape, e: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each column to unit L2 norm; columns with ~zero norm stay zero.

    The tiny-column mask is computed from the forward values and treated as a
    constant, so gradients through dead columns are exactly zero.
    """
    n = e.shape[0]
    sq = tape.mul(e, e)
    col_sums = tape.matmul(tape.constant(np.ones((1, n))), sq)
    norms = tape.sqrt(col_sums)
    alive = (norms.data >= eps).astype(float)
    denom = tape.add(norms, tape.constant(1.0 - alive))
    scaled = tape.div(e, denom)
    return tape.mul(scaled, tape.constant(np.broadcast_to(alive, scaled.shape).copy()))


class FusionAttention:
    """Scaled dot-product attention over the three per-order embeddings.

    The lane, hour and merchant embeddings form a three-token sequence per
    order.  Each head projects all tokens with shared query/key/value maps,
    attends, mean-pools the three attended outputs, and the concatenated
    heads go through a final linear map.  There are no bias terms, so
    all-zero embeddings fuse to an all-zero vector.
    """

    def __init__(self, rng, in_dim: int, out_dim: int, heads: int = 4, name: str = "fuse"):
        if out_dim % heads:
            raise ValueError(f"fusion: out_dim {out_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.wq = [leaf(glorot(rng, in_dim, self.head_dim), name=f"{name}.h{k}.Wq") for k in range(heads)]
        self.wk = [leaf(glorot(rng, in_dim, self.head_dim), name=f"{name}.h{k}.Wk") for k in range(heads)]
        self.wv = [leaf(glorot(rng, in_dim, self.head_dim), name=f"{name}.h{k}.Wv") for k in range(heads)]
        self.wo = leaf(glorot(rng, out_dim, out_dim), name=f"{name}.Wo")

    def params(self) -> dict[str, Tensor]:
        out = {self.wo.name: self.wo}
        for t in (*self.wq, *self.wk, *self.wv):
            out[t.name] = t
        return out

    def forward(self, tape: Tape, tokens: list[Tensor], attn_out: list | None = None) -> Tensor:
        if len(tokens) != 3:
            raise ValueError(f"fusion: expected 3 token embeddings, got {len(tokens)}")
        b = tokens[0].shape[0]
        d = self.head_dim
        ones_d = tape.constant(np.ones((d, 1)))
        ones_row_d = tape.constant(np.ones((1, d)))
        inv_sqrt_d = 1.0 / np.sqrt(d)

        head_outs = []
        for k in range(self.heads):
            q = [tape.matmul(t, self.wq[k]) for t in tokens]
            key = [tape.matmul(t, self.wk[k]) for t in tokens]
            v = [tape.matmul(t, self.wv[k]) for t in tokens]
            pooled = None
            for i in range(3):
                # row-wise dot products against each key, stacked to (b, 3)
                scores = tape.concat(
                    [tape.matmul(tape.mul(q[i], key[j]), ones_d) for j in range(3)], axis=1
                )
                attn = tape.softmax_rows(tape.mul(scores, inv_sqrt_d))
                if attn_out is not None:
                    attn_out.append(attn.data.copy())
                out_i = None
                for j in range(3):
                    w_col = tape.slice(attn, cols=(j, j + 1))
                    term = tape.mul(tape.matmul(w_col, ones_row_d), v[j])
                    out_i = term if out_i is None else tape.add(out_i, term)
                pooled = out_i if pooled is None else tape.add(pooled, out_i)
            head_outs.append(tape.mul(pooled, 1.0 / 3.0))
        fused = head_outs[0] if len(head_outs) == 1 else tape.concat(head_outs, axis=1)
        return tape.matmul(fused, self.wo)


def gather_rows(tape: Tape, table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a tensor by index, as a selection-matrix product."""
    sel = np.zeros((len(indices), table.shape[0]))
    sel[np.arange(len(indices)), indices] = 1.0
    return tape.matmul(tape.constant(sel), table)
