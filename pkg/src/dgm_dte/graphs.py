"""Graph construction for the three relation views of an order stream.

Spatial: one node per origin-destination lane, k-nearest-neighbour edges under
a route-space metric.  Temporal: the fixed 168-hour week ring with same-hour
cross-day links.  Merchant: one node per merchant, edges between merchants
whose delivery-time histograms are cosine-similar.

The spatial and merchant graphs get an extra isolated fallback node carrying
mean features; orders whose lane or merchant was never seen in training are
routed there.  The temporal domain is closed (every hour of the week exists),
so that graph has no fallback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import HOURS_PER_WEEK, Orders

TEMPORAL_NODES = HOURS_PER_WEEK


@dataclass
class Graph:
    """Dense undirected graph: 0/1 adjacency (zero diagonal) plus node features.

    `weights` holds the full symmetric pairwise distance matrix for graphs
    built from a metric; consumers mask it with `adjacency` as needed.
    """

    adjacency: np.ndarray
    features: np.ndarray
    weights: np.ndarray | None = None
    fallback: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


def knn_adjacency(dist: np.ndarray, k: int) -> np.ndarray:
    """Symmetric k-nearest-neighbour adjacency from a distance matrix.

    Ties resolve toward the lower node index.  k is clamped to n-1 with a
    warning when the graph is too small.  The union of directed picks is
    symmetrised, so degrees can exceed k.
    """
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {dist.shape}")
    if n < 2:
        return np.zeros((n, n))
    if k > n - 1:
        warnings.warn(f"knn k={k} clamped to {n - 1} for a {n}-node graph", stacklevel=2)
        k = n - 1
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    adj = np.zeros((n, n))
    for i in range(n):
        picks = np.argsort(d[i], kind="stable")[:k]
        adj[i, picks] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    return adj


def _grid_cell_one_hot(x: np.ndarray, y: np.ndarray, grid: int, coord_range: float) -> np.ndarray:
    cell_size = coord_range / grid
    cx = np.minimum((x / cell_size).astype(int), grid - 1)
    cy = np.minimum((y / cell_size).astype(int), grid - 1)
    out = np.zeros((len(x), grid * grid))
    out[np.arange(len(x)), cy * grid + cx] = 1.0
    return out


def build_spatial_graph(
    train: Orders, k: int = 8, grid: int = 4, coord_range: float = 500.0
) -> tuple[Graph, dict[tuple[int, int], int]]:
    """Lane graph over distinct (sender, receiver) pairs seen in training.

    Distance between lanes is origin-to-origin plus destination-to-destination
    Euclidean distance.  Features: scaled endpoint coordinates, one-hot grid
    cells for both endpoints, and scaled mean/std of the lane's training
    delivery times.
    """
    keys = sorted(set(zip(train.sender_id.tolist(), train.receiver_id.tolist())))
    od_index = {key: i for i, key in enumerate(keys)}
    n = len(keys)
    if n == 0:
        raise ValueError("spatial graph needs at least one training order")

    coords = np.zeros((n, 4))
    stats = np.zeros((n, 2))
    rows = np.fromiter((od_index[k_] for k_ in zip(train.sender_id.tolist(), train.receiver_id.tolist())), dtype=np.int64)
    for i in range(n):
        mask = rows == i
        coords[i] = (
            train.origin_x[mask][0],
            train.origin_y[mask][0],
            train.dest_x[mask][0],
            train.dest_y[mask][0],
        )
        y = train.delivery_hours[mask]
        stats[i] = (y.mean() / 100.0, y.std() / 100.0)

    o_dist = np.linalg.norm(coords[:, None, :2] - coords[None, :, :2], axis=2)
    d_dist = np.linalg.norm(coords[:, None, 2:] - coords[None, :, 2:], axis=2)
    dist = o_dist + d_dist
    adj = knn_adjacency(dist, k)

    feats = np.concatenate(
        [
            coords / coord_range,
            _grid_cell_one_hot(coords[:, 0], coords[:, 1], grid, coord_range),
            _grid_cell_one_hot(coords[:, 2], coords[:, 3], grid, coord_range),
            stats,
        ],
        axis=1,
    )
    graph = _append_fallback(Graph(adjacency=adj, features=feats, weights=dist))
    return graph, od_index


def build_temporal_graph() -> Graph:
    """Hour-of-week graph: ring neighbours plus the same hour on every other day.

    168 nodes, degree 8 everywhere (two ring edges, six cross-day edges).
    Features: one-hot hour of day, one-hot day of week, and the sin/cos phase
    of the week.
    """
    n = TEMPORAL_NODES
    adj = np.zeros((n, n))
    for i in range(n):
        for j in (i - 1, i + 1):
            adj[i, j % n] = 1.0
        for d in range(1, 7):
            adj[i, (i + 24 * d) % n] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)

    idx = np.arange(n)
    feats = np.zeros((n, 24 + 7 + 2))
    feats[idx, idx % 24] = 1.0
    feats[idx, 24 + idx // 24] = 1.0
    feats[:, 31] = np.sin(2.0 * np.pi * idx / n)
    feats[:, 32] = np.cos(2.0 * np.pi * idx / n)
    return Graph(adjacency=adj, features=feats)


def merchant_histograms(
    train: Orders, bin_hours: float = 12.0, max_hours: float = 360.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-merchant L1-normalised delivery-time histograms over fixed bins.

    Returns (sorted merchant ids, histograms, raw per-merchant hour arrays'
    (mean, std) pairs).  Hours at or beyond max_hours land in the last bin.
    """
    ids = np.unique(train.merchant_id)
    n_bins = int(round(max_hours / bin_hours))
    hists = np.zeros((len(ids), n_bins))
    stats = np.zeros((len(ids), 2))
    for i, m in enumerate(ids):
        y = train.delivery_hours[train.merchant_id == m]
        bins = np.minimum((y / bin_hours).astype(int), n_bins - 1)
        hists[i] = np.bincount(bins, minlength=n_bins)
        hists[i] /= hists[i].sum()
        stats[i] = (y.mean() / 100.0, y.std() / 100.0)
    return ids, hists, stats


def build_merchant_graph(
    train: Orders, tau: float = 0.5, bin_hours: float = 12.0, max_hours: float = 360.0
) -> tuple[Graph, dict[int, int]]:
    """Merchant similarity graph: edge where histogram cosine similarity >= tau."""
    ids, hists, stats = merchant_histograms(train, bin_hours, max_hours)
    norms = np.linalg.norm(hists, axis=1)
    cos = (hists @ hists.T) / np.outer(norms, norms)
    adj = (cos >= tau).astype(float)
    np.fill_diagonal(adj, 0.0)
    feats = np.concatenate([hists, stats], axis=1)
    graph = _append_fallback(Graph(adjacency=adj, features=feats))
    return graph, {int(m): i for i, m in enumerate(ids)}


def _append_fallback(g: Graph) -> Graph:
    """Add an isolated catch-all node whose features are the mean of the rest."""
    n = g.n_nodes
    adj = np.zeros((n + 1, n + 1))
    adj[:n, :n] = g.adjacency
    feats = np.vstack([g.features, g.features.mean(axis=0)])
    weights = None
    if g.weights is not None:
        weights = np.zeros((n + 1, n + 1))
        weights[:n, :n] = g.weights
    return Graph(adjacency=adj, features=feats, weights=weights, fallback=n)


@dataclass
class GraphSet:
    spatial: Graph
    temporal: Graph
    merchant: Graph
    od_index: dict[tuple[int, int], int]
    merchant_index: dict[int, int]


def build_graphs(
    train: Orders,
    k: int = 8,
    grid: int = 4,
    coord_range: float = 500.0,
    tau: float = 0.5,
    hist_bin_hours: float = 12.0,
    hist_max_hours: float = 360.0,
) -> GraphSet:
    spatial, od_index = build_spatial_graph(train, k=k, grid=grid, coord_range=coord_range)
    merchant, m_index = build_merchant_graph(
        train, tau=tau, bin_hours=hist_bin_hours, max_hours=hist_max_hours
    )
    return GraphSet(
        spatial=spatial,
        temporal=build_temporal_graph(),
        merchant=merchant,
        od_index=od_index,
        merchant_index=m_index,
    )


def assign_nodes(orders: Orders, gs: GraphSet) -> np.ndarray:
    """Map each order to its (spatial, temporal, merchant) node indices.

    Lanes or merchants absent from the training graphs map to the fallback
    node of the corresponding graph.
    """
    n = len(orders)
    out = np.zeros((n, 3), dtype=np.int64)
    sp_fb = gs.spatial.fallback
    m_fb = gs.merchant.fallback
    senders = orders.sender_id.tolist()
    receivers = orders.receiver_id.tolist()
    merchants = orders.merchant_id.tolist()
    how = orders.hour_of_week()
    for i in range(n):
        out[i, 0] = gs.od_index.get((senders[i], receivers[i]), sp_fb)
        out[i, 1] = how[i]
        out[i, 2] = gs.merchant_index.get(int(merchants[i]), m_fb)
    return out
