"""Dual-branch graph regression model with head/tail routing.

A classifier stack decides whether an order is a fast ("head") or slow
("tail") delivery; each branch has its own graph-representation stack and the
two share one regression network.  During training, tail-branch embeddings
are scaled by inverse-sqrt label density so rare slow orders speak louder;
the loss itself stays a plain mean absolute error (plus the classifier's
cross-entropy).  Ablation variants drop or rewire these parts:

  full       classifier routing, both branches, tail embedding re-weighting
  ht-reg     no classifier; ground-truth routing in training, all-head at eval
  im-reg     no classifier; every order through both branches, tail-side
             embeddings re-weighted from the full label density, then averaged
  order-rep  single branch, plain mean absolute error
  re-weight  single branch, embeddings re-weighted from the full density
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import Orders
from .graphs import GraphSet, assign_nodes, build_graphs
from .imbalance import DensityModel, density_weights, fit_density, reweight_embeddings
from .layers import (
    MLP,
    FusionAttention,
    GATLayer,
    GCNLayer,
    gather_rows,
    gcn_propagation,
    normalize_columns,
)
from .metrics import EvalReport, evaluate
from .numerics import AdamState, Tape, Tensor, adam_step

VARIANTS = ("full", "ht-reg", "im-reg", "order-rep", "re-weight")
ROUTING_MODES = ("teacher_forcing", "predicted")

HEAD, TAIL = 0, 1


@dataclass
class ModelConfig:
    variant: str = "full"
    gnn_dim: int = 32
    gat_heads: int = 2
    fusion_dim: int = 64
    fusion_heads: int = 4
    dnn_dims: tuple = (128, 64, 32)
    classifier_dims: tuple = (64,)
    gnn_activation: str = "relu"
    use_dist_bias: bool = False
    threshold_hours: float = 96.0
    bce_weight: float = 1.0
    # "teacher_forcing" routes training rows by their true label side;
    # "predicted" routes by the classifier, as evaluation always does.
    routing_mode: str = "teacher_forcing"
    reweight_on: bool = True
    reweight_normalize: bool = True
    kde_bandwidth: float | None = None
    lr: float = 5e-4
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(
                f"unknown routing_mode {self.routing_mode!r}, expected one of {ROUTING_MODES}"
            )
        self.dnn_dims = tuple(self.dnn_dims)
        self.classifier_dims = tuple(self.classifier_dims)


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    bad = set(d) - known
    if bad:
        raise ValueError(f"unknown model option(s): {sorted(bad)}")
    return replace(ModelConfig(), **d)


class GraphStack:
    """One graph-representation pipeline: GAT x2 on the lane graph, GCN x2 on
    the hour and merchant graphs, per-column normalisation, then token fusion."""

    def __init__(self, rng, graphs: GraphSet, props: dict, cfg: ModelConfig, name: str):
        self.graphs = graphs
        self.props = props
        gd = cfg.gnn_dim
        act = cfg.gnn_activation
        sp_in = graphs.spatial.features.shape[1]
        t_in = graphs.temporal.features.shape[1]
        m_in = graphs.merchant.features.shape[1]
        self.sp = [
            GATLayer(rng, sp_in, gd, heads=cfg.gat_heads, activation=act,
                     use_dist_bias=cfg.use_dist_bias, name=f"{name}.sp0"),
            GATLayer(rng, gd, gd, heads=cfg.gat_heads, activation=act,
                     use_dist_bias=cfg.use_dist_bias, name=f"{name}.sp1"),
        ]
        self.tm = [
            GCNLayer(rng, t_in, gd, activation=act, name=f"{name}.tm0"),
            GCNLayer(rng, gd, gd, activation=act, name=f"{name}.tm1"),
        ]
        self.mc = [
            GCNLayer(rng, m_in, gd, activation=act, name=f"{name}.mc0"),
            GCNLayer(rng, gd, gd, activation=act, name=f"{name}.mc1"),
        ]
        self.fuse = FusionAttention(rng, gd, cfg.fusion_dim, heads=cfg.fusion_heads,
                                    name=f"{name}.fuse")

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in (*self.sp, *self.tm, *self.mc, self.fuse):
            out.update(layer.params())
        return out

    def forward(self, tape: Tape, nodes: np.ndarray, attn_out: list | None = None) -> Tensor:
        """Fused embedding for each row of (spatial, temporal, merchant) indices.

        ``attn_out`` collects every attention matrix produced along the way
        (lane-graph heads, then fusion rows) when a list is supplied.
        """
        g = self.graphs
        sp = tape.constant(g.spatial.features)
        for layer in self.sp:
            sp = layer.forward(tape, sp, g.spatial, attn_out=attn_out)
        sp = normalize_columns(tape, sp)

        tm = tape.constant(g.temporal.features)
        for layer in self.tm:
            tm = layer.forward(tape, tm, self.props["temporal"])
        tm = normalize_columns(tape, tm)

        mc = tape.constant(g.merchant.features)
        for layer in self.mc:
            mc = layer.forward(tape, mc, self.props["merchant"])
        mc = normalize_columns(tape, mc)

        tokens = [
            gather_rows(tape, sp, nodes[:, 0]),
            gather_rows(tape, tm, nodes[:, 1]),
            gather_rows(tape, mc, nodes[:, 2]),
        ]
        return self.fuse.forward(tape, tokens, attn_out=attn_out)


def route_split(tail_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable head/tail partition and the inverse permutation that undoes it.

    Concatenating rows picked by (head_idx, tail_idx) and then gathering with
    inv_perm restores the original row order exactly.
    """
    tail_mask = np.asarray(tail_mask, dtype=bool)
    head_idx = np.nonzero(~tail_mask)[0]
    tail_idx = np.nonzero(tail_mask)[0]
    perm = np.concatenate([head_idx, tail_idx])
    inv_perm = np.empty(perm.size, dtype=np.int64)
    inv_perm[perm] = np.arange(perm.size)
    return head_idx, tail_idx, inv_perm


class DGMModel:
    """Variant-configurable dual-graph model over a fixed training graph set."""

    def __init__(self, cfg: ModelConfig, graphs: GraphSet):
        self.cfg = cfg
        self.graphs = graphs
        self.props = {
            "temporal": gcn_propagation(graphs.temporal.adjacency),
            "merchant": gcn_propagation(graphs.merchant.adjacency),
        }
        rng = np.random.default_rng(cfg.seed)
        self.stacks: dict[str, GraphStack] = {}
        if cfg.variant == "full":
            branch_names = ("clf", "head", "tail")
        elif cfg.variant in ("ht-reg", "im-reg"):
            branch_names = ("head", "tail")
        elif cfg.variant == "order-rep":
            branch_names = ("head",)
        else:  # re-weight
            branch_names = ("tail",)
        for name in branch_names:
            self.stacks[name] = GraphStack(rng, graphs, self.props, cfg, name)
        self.classifier = None
        if cfg.variant == "full":
            self.classifier = MLP(rng, [cfg.fusion_dim, *cfg.classifier_dims, 2], name="clf_out")
        self.dnn = MLP(rng, [cfg.fusion_dim, *cfg.dnn_dims, 1], name="dnn")

        self.params: dict[str, Tensor] = {}
        for stack in self.stacks.values():
            self.params.update(stack.params())
        if self.classifier is not None:
            self.params.update(self.classifier.params())
        self.params.update(self.dnn.params())

    # -- parameter io ------------------------------------------------------

    def export_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()

    # -- forward pieces ------------------------------------------------------

    def regress(self, tape: Tape, emb: Tensor) -> Tensor:
        """Shared regression trunk; predictions are clamped nonnegative."""
        return tape.relu(self.dnn.forward(tape, emb))

    def classifier_logits(self, tape: Tape, nodes: np.ndarray) -> Tensor:
        return self.classifier.forward(tape, self.stacks["clf"].forward(tape, nodes))

    def _branch_preds(self, tape: Tape, nodes: np.ndarray, route_mask: np.ndarray,
                      tail_w: np.ndarray | None = None) -> Tensor:
        """Route rows to the two branches and merge predictions back in order.

        ``tail_w`` (batch-aligned, or None) scales the tail branch's fused
        embeddings before the shared trunk; weights are 1 everywhere at eval.
        """
        head_idx, tail_idx, inv_perm = route_split(route_mask)
        parts = []
        if head_idx.size:
            parts.append(self.regress(tape, self.stacks["head"].forward(tape, nodes[head_idx])))
        if tail_idx.size:
            emb = self.stacks["tail"].forward(tape, nodes[tail_idx])
            if tail_w is not None:
                emb = reweight_embeddings(tape, emb, tail_w[tail_idx])
            parts.append(self.regress(tape, emb))
        cat = parts[0] if len(parts) == 1 else tape.concat(parts, axis=0)
        return gather_rows(tape, cat, inv_perm)

    # -- training loss ------------------------------------------------------

    def train_loss(self, tape: Tape, nodes: np.ndarray, y: np.ndarray,
                   tail_weights: np.ndarray | None) -> tuple[Tensor, dict]:
        """Variant-dependent loss for one batch: mean absolute error over the
        merged predictions, plus the classifier's cross-entropy on the full
        variant.  Re-weighting acts on embeddings, never on the error terms.

        ``tail_weights`` carries precomputed unnormalised inverse-density
        weights aligned with the batch rows (None where the variant skips
        re-weighting).  Returns the scalar loss and a stats dict.
        """
        cfg = self.cfg
        b = len(y)
        y_col = tape.constant(y.reshape(-1, 1))
        tail_mask = y > cfg.threshold_hours
        stats = {"n": b, "n_tail": int(tail_mask.sum())}

        logits = None
        if cfg.variant == "full":
            logits = self.classifier_logits(tape, nodes)

        if cfg.variant in ("full", "ht-reg"):
            # Weight only rows whose true label is on the tail side; rows the
            # classifier mis-routes into the tail branch keep weight one.
            w = None
            if tail_weights is not None and tail_mask.any():
                w = np.ones(b)
                wt = tail_weights[tail_mask]
                if cfg.reweight_normalize:
                    wt = wt / wt.mean()
                w[tail_mask] = wt
            route = tail_mask
            if cfg.variant == "full" and cfg.routing_mode == "predicted":
                route = np.argmax(logits.data, axis=1) == TAIL
            preds = self._branch_preds(tape, nodes, route, tail_w=w)
        elif cfg.variant == "im-reg":
            e_head = self.stacks["head"].forward(tape, nodes)
            e_tail = self.stacks["tail"].forward(tape, nodes)
            if tail_weights is not None:
                e_tail = reweight_embeddings(
                    tape, e_tail, self._normalized(tail_weights))
            preds = self.regress(tape, tape.mul(tape.add(e_head, e_tail), 0.5))
        elif cfg.variant == "order-rep":
            preds = self.regress(tape, self.stacks["head"].forward(tape, nodes))
        else:  # re-weight
            emb = self.stacks["tail"].forward(tape, nodes)
            if tail_weights is not None:
                emb = reweight_embeddings(tape, emb, self._normalized(tail_weights))
            preds = self.regress(tape, emb)

        loss = tape.mean(tape.abs(tape.sub(preds, y_col)))
        stats["mae_term"] = loss.data.item()

        if cfg.variant == "full":
            targets = np.zeros((b, 2))
            targets[np.arange(b), tail_mask.astype(int)] = 1.0
            bce = _sigmoid_bce(tape, logits, targets)
            stats["bce_term"] = bce.data.item()
            loss = tape.add(loss, tape.mul(bce, cfg.bce_weight))
        return loss, stats

    def _normalized(self, w: np.ndarray) -> np.ndarray:
        return w / w.mean() if self.cfg.reweight_normalize else w

    # -- inference ------------------------------------------------------------

    def predict_batch(self, tape: Tape, nodes: np.ndarray) -> np.ndarray:
        """Predictions for one batch under eval-time routing."""
        cfg = self.cfg
        if cfg.variant == "full":
            logits = self.classifier_logits(tape, nodes)
            tail_mask = np.argmax(logits.data, axis=1) == TAIL
            return self._branch_preds(tape, nodes, tail_mask).data.ravel()
        if cfg.variant == "ht-reg":
            branch = "head"
        elif cfg.variant == "order-rep":
            branch = "head"
        elif cfg.variant == "re-weight":
            branch = "tail"
        else:  # im-reg
            e_head = self.stacks["head"].forward(tape, nodes)
            e_tail = self.stacks["tail"].forward(tape, nodes)
            return self.regress(tape, tape.mul(tape.add(e_head, e_tail), 0.5)).data.ravel()
        return self.regress(tape, self.stacks[branch].forward(tape, nodes)).data.ravel()

    def classify(self, nodes: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Predicted head/tail class per row (full variant only)."""
        if self.classifier is None:
            raise ValueError(f"variant {self.cfg.variant!r} has no classifier")
        out = np.empty(len(nodes), dtype=np.int64)
        for lo in range(0, len(nodes), batch_size):
            tape = Tape()
            logits = self.classifier_logits(tape, nodes[lo : lo + batch_size])
            out[lo : lo + batch_size] = np.argmax(logits.data, axis=1)
        return out

    def predict(self, nodes: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = np.empty(len(nodes))
        for lo in range(0, len(nodes), batch_size):
            out[lo : lo + batch_size] = self.predict_batch(Tape(), nodes[lo : lo + batch_size])
        return out


def _sigmoid_bce(tape: Tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-unit binary cross-entropy against one-hot targets, averaged over
    all units.  softplus keeps it exact for extreme logits."""
    t = tape.constant(targets)
    t_bar = tape.constant(1.0 - targets)
    pos = tape.mul(t, tape.softplus(tape.neg(logits)))
    neg = tape.mul(t_bar, tape.softplus(logits))
    return tape.mean(tape.add(pos, neg))


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: DGMModel
    graphs: GraphSet
    log_rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    density: DensityModel | None = None


def fit_label_density(cfg: ModelConfig, train_y: np.ndarray) -> DensityModel | None:
    """Density used for embedding re-weighting, or None when skipped.

    Dual-branch variants model only the tail side of the threshold (that is
    the branch the weights apply to); the single-branch and merged variants
    model the entire label distribution.
    """
    if not cfg.reweight_on:
        return None
    if cfg.variant in ("full", "ht-reg"):
        tail_y = train_y[train_y > cfg.threshold_hours]
        if tail_y.size == 0:
            return None
        return fit_density(tail_y, bandwidth=cfg.kde_bandwidth)
    if cfg.variant in ("im-reg", "re-weight"):
        return fit_density(train_y, bandwidth=cfg.kde_bandwidth)
    return None


def train_model(
    cfg: ModelConfig,
    train_orders: Orders,
    val_orders: Orders,
    graphs: GraphSet | None = None,
    progress=None,
) -> TrainResult:
    """Adam training with per-epoch validation; keeps the best-val-MAE weights.

    ``progress`` is an optional callable fed one dict per epoch (the same row
    that lands in the training log).
    """
    if graphs is None:
        graphs = build_graphs(train_orders)
    model = DGMModel(cfg, graphs)
    result = TrainResult(model=model, graphs=graphs)

    nodes_tr = assign_nodes(train_orders, graphs)
    y_tr = train_orders.delivery_hours
    nodes_val = assign_nodes(val_orders, graphs)
    y_val = val_orders.delivery_hours

    result.density = fit_label_density(cfg, y_tr)
    all_weights = None
    if result.density is not None:
        if cfg.variant in ("full", "ht-reg"):
            # Only tail rows ever consume a weight; evaluating the tail
            # density at head labels would just trip the clamp floor.
            tail = y_tr > cfg.threshold_hours
            all_weights = np.ones(len(y_tr))
            all_weights[tail], _ = density_weights(result.density, y_tr[tail], normalize=False)
        else:
            all_weights, _ = density_weights(result.density, y_tr, normalize=False)

    adam = AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng(cfg.seed)
    best_params = model.export_params()

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(len(y_tr))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            tape = Tape()
            w = all_weights[idx] if all_weights is not None else None
            loss, _ = model.train_loss(tape, nodes_tr[idx], y_tr[idx], w)
            if not np.isfinite(loss.data.item()):
                yb = y_tr[idx]
                wb = "none" if w is None else f"[{w.min():.3g}, {w.max():.3g}]"
                raise RuntimeError(
                    f"training diverged: non-finite loss {loss.data.item()} "
                    f"at epoch {epoch}, batch {n_batches}; batch rows {idx[:8].tolist()}"
                    f"{'...' if idx.size > 8 else ''}, labels [{yb.min():.3g}, "
                    f"{yb.max():.3g}], weights {wb}"
                )
            tape.backward(loss)
            step_params = {n: p for n, p in model.params.items() if p.grad is not None}
            adam_step(step_params, adam)
            epoch_loss += loss.data.item()
            n_batches += 1

        val_preds = model.predict(nodes_val, batch_size=max(cfg.batch_size, 1024))
        val_report = evaluate(y_val, val_preds)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_mae": val_report.mae,
            "val_mape": val_report.mape,
            "val_ew": val_report.ew,
        }
        result.log_rows.append(row)
        if progress is not None:
            progress(row)
        if val_report.mae < result.best_val_mae:
            result.best_val_mae = val_report.mae
            result.best_epoch = epoch
            best_params = model.export_params()

    model.load_params(best_params)
    return result


def evaluate_model(
    model: DGMModel, graphs: GraphSet, orders: Orders, shot=None, ew_p: float = 0.9
) -> EvalReport:
    nodes = assign_nodes(orders, graphs)
    preds = model.predict(nodes)
    return evaluate(orders.delivery_hours, preds, shot=shot, ew_p=ew_p)
