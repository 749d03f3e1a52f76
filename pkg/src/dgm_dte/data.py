"""Synthetic order corpus: generation, CSV round-trip, temporal splits, shot bins.

Delivery times are drawn from a two-part mixture: a lognormal bulk around two
days and a Pareto tail of multi-week stragglers.  Tail membership is tied to a
small set of "slow" merchants so that the tail is predictable from order
attributes; the marginal tail rate stays at `tail_weight`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace

import numpy as np

ORDERS_COLUMNS = (
    "order_id",
    "merchant_id",
    "sender_id",
    "receiver_id",
    "payment_ts",
    "origin_x",
    "origin_y",
    "dest_x",
    "dest_y",
    "delivery_hours",
)

_INT_COLUMNS = {"order_id", "merchant_id", "sender_id", "receiver_id", "payment_ts"}

SECONDS_PER_DAY = 86400
HOURS_PER_WEEK = 168


@dataclass
class Orders:
    """Column-oriented order table. payment_ts counts seconds from a Monday 00:00."""

    order_id: np.ndarray
    merchant_id: np.ndarray
    sender_id: np.ndarray
    receiver_id: np.ndarray
    payment_ts: np.ndarray
    origin_x: np.ndarray
    origin_y: np.ndarray
    dest_x: np.ndarray
    dest_y: np.ndarray
    delivery_hours: np.ndarray

    def __len__(self) -> int:
        return self.order_id.shape[0]

    def subset(self, index) -> "Orders":
        """Row selection by mask or index array; arrays are copies."""
        return Orders(**{f.name: getattr(self, f.name)[index].copy() for f in fields(self)})

    def day(self) -> np.ndarray:
        return self.payment_ts // SECONDS_PER_DAY

    def hour_of_week(self) -> np.ndarray:
        return (self.payment_ts // 3600) % HOURS_PER_WEEK


@dataclass
class GeneratorConfig:
    n_orders: int = 10000
    n_merchants: int = 60
    n_senders: int = 25
    n_receivers: int = 25
    span_days: int = 30
    tail_weight: float = 0.08
    slow_merchant_frac: float = 0.08
    slow_merchant_mult: float = 100.0
    bulk_median_hours: float = 48.0
    bulk_log_sigma: float = 0.35
    tail_min_hours: float = 96.0
    tail_alpha: float = 2.0
    od_zipf_a: float = 1.3
    coord_range: float = 500.0
    seed: int = 0


def _solve_tail_rates(mult: np.ndarray, target: float, cap: float = 0.95) -> np.ndarray:
    """Per-merchant tail rates min(c * mult, cap) whose mean equals target.

    A plain proportional rescale loses mass once risky merchants hit the
    probability cap, so the scale is solved by bisection instead.
    """
    if target <= 0:
        return np.zeros_like(mult)
    if target >= cap:
        raise ValueError(f"tail_weight must be below {cap}, got {target}")
    lo, hi = 0.0, cap / mult.min()
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.minimum(mid * mult, cap).mean() < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(hi * mult, cap)


def generate_orders(cfg: GeneratorConfig) -> Orders:
    """Draw a seeded synthetic order table.

    Sender and receiver sites get fixed coordinates in
    [0, coord_range]^2.  Origin-destination pairs are sampled with
    Zipf-like weights over a shuffled enumeration of all site pairs, so a
    few lanes dominate and many appear rarely.  Each merchant carries a
    tail-risk multiplier: slow merchants produce Pareto-tail deliveries
    at a rate near one, the rest almost never, with the order-level
    marginal equal to cfg.tail_weight.
    """
    if cfg.n_orders <= 0:
        raise ValueError("n_orders must be positive")
    rng = np.random.default_rng(cfg.seed)

    sender_xy = rng.uniform(0.0, cfg.coord_range, size=(cfg.n_senders, 2))
    receiver_xy = rng.uniform(0.0, cfg.coord_range, size=(cfg.n_receivers, 2))

    # Zipf-like lane popularity over all sender x receiver pairs.
    n_pairs = cfg.n_senders * cfg.n_receivers
    pair_order = rng.permutation(n_pairs)
    ranks = np.empty(n_pairs)
    ranks[pair_order] = np.arange(1, n_pairs + 1)
    pair_p = ranks ** (-cfg.od_zipf_a)
    pair_p /= pair_p.sum()
    pair_idx = rng.choice(n_pairs, size=cfg.n_orders, p=pair_p)
    sender = pair_idx // cfg.n_receivers
    receiver = pair_idx % cfg.n_receivers

    merchant = rng.integers(0, cfg.n_merchants, size=cfg.n_orders)
    payment_ts = rng.integers(0, cfg.span_days * SECONDS_PER_DAY, size=cfg.n_orders)

    # Merchant-conditional tail rate with the marginal held at tail_weight.
    mult = np.ones(cfg.n_merchants)
    n_slow = int(round(cfg.slow_merchant_frac * cfg.n_merchants))
    if cfg.tail_weight > 0 and cfg.slow_merchant_frac > 0:
        n_slow = max(n_slow, 1)
    slow_ids = rng.choice(cfg.n_merchants, size=n_slow, replace=False)
    mult[slow_ids] = cfg.slow_merchant_mult
    tail_rate = _solve_tail_rates(mult, cfg.tail_weight)
    is_tail = rng.random(cfg.n_orders) < tail_rate[merchant]

    bulk = rng.lognormal(
        math.log(cfg.bulk_median_hours), cfg.bulk_log_sigma, size=cfg.n_orders
    )
    tail = cfg.tail_min_hours * (1.0 - rng.random(cfg.n_orders)) ** (-1.0 / cfg.tail_alpha)
    hours = np.where(is_tail, tail, bulk)

    # Additive attribute effects so the graphs carry signal.
    merchant_effect = rng.normal(0.0, 3.0, size=cfg.n_merchants)
    route_noise = rng.normal(0.0, 2.0, size=n_pairs)
    route_km = np.linalg.norm(sender_xy[sender] - receiver_xy[receiver], axis=1)
    hour_of_week = (payment_ts // 3600) % HOURS_PER_WEEK
    hour_effect = 3.0 * np.sin(2.0 * np.pi * hour_of_week / HOURS_PER_WEEK) + 1.5 * np.cos(
        2.0 * np.pi * (hour_of_week % 24) / 24.0
    )
    hours = hours + merchant_effect[merchant] + 0.02 * route_km + route_noise[pair_idx]
    hours = np.maximum(hours + hour_effect, 1.0)

    return Orders(
        order_id=np.arange(cfg.n_orders, dtype=np.int64),
        merchant_id=merchant.astype(np.int64),
        sender_id=sender.astype(np.int64),
        receiver_id=receiver.astype(np.int64),
        payment_ts=payment_ts.astype(np.int64),
        origin_x=sender_xy[sender, 0].copy(),
        origin_y=sender_xy[sender, 1].copy(),
        dest_x=receiver_xy[receiver, 0].copy(),
        dest_y=receiver_xy[receiver, 1].copy(),
        delivery_hours=hours,
    )


def write_orders_csv(path, orders: Orders) -> None:
    """Write the canonical comma-delimited order table (floats as %.17g)."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(ORDERS_COLUMNS) + "\n")
        cols = [getattr(orders, c) for c in ORDERS_COLUMNS]
        for row in zip(*cols):
            cells = []
            for name, v in zip(ORDERS_COLUMNS, row):
                if name in _INT_COLUMNS:
                    cells.append(str(int(v)))
                else:
                    cells.append(format(float(v), ".17g"))
            fh.write(",".join(cells) + "\n")


def read_orders_csv(path) -> Orders:
    """Parse an order CSV, validating the header and every row.

    Raises ValueError with the offending row number on any malformed input.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if tuple(header) != ORDERS_COLUMNS:
            raise ValueError(f"{path}: bad header {header!r}")
        raw = {c: [] for c in ORDERS_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ORDERS_COLUMNS):
                raise ValueError(f"{path}: row {lineno}: expected {len(ORDERS_COLUMNS)} fields, got {len(row)}")
            for name, cell in zip(ORDERS_COLUMNS, row):
                try:
                    raw[name].append(int(cell) if name in _INT_COLUMNS else float(cell))
                except ValueError:
                    raise ValueError(f"{path}: row {lineno}: bad value {cell!r} for {name}") from None
    arrays = {
        c: np.asarray(raw[c], dtype=np.int64 if c in _INT_COLUMNS else np.float64)
        for c in ORDERS_COLUMNS
    }
    return Orders(**arrays)


@dataclass
class SplitSpec:
    """Contiguous day ranges; an order on a boundary goes to the later block."""

    train_days: int = 21
    val_days: int = 4
    test_days: int = 5


def split_orders(orders: Orders, spec: SplitSpec) -> tuple[Orders, Orders, Orders]:
    day = orders.day()
    t_end = spec.train_days
    v_end = t_end + spec.val_days
    s_end = v_end + spec.test_days
    train = orders.subset(day < t_end)
    val = orders.subset((day >= t_end) & (day < v_end))
    test = orders.subset((day >= v_end) & (day < s_end))
    return train, val, test


@dataclass
class ShotSpec:
    bin_hours: float = 12.0
    n_high: int = 100
    n_low: int = 20


SHOT_LOW, SHOT_MID, SHOT_HIGH = 0, 1, 2
SHOT_NAMES = ("low", "mid", "high")


def label_bins(labels: np.ndarray, bin_hours: float) -> np.ndarray:
    return np.floor(np.asarray(labels) / bin_hours).astype(np.int64)


def shot_labels(train_labels: np.ndarray, eval_labels: np.ndarray, spec: ShotSpec) -> np.ndarray:
    """Classify each eval label by how well its bin is covered in training.

    Returns SHOT_HIGH where the training bin holds at least n_high samples,
    SHOT_LOW where it holds fewer than n_low (including bins never seen in
    training), SHOT_MID otherwise.
    """
    train_bins = label_bins(train_labels, spec.bin_hours)
    counts: dict[int, int] = {}
    for b in train_bins:
        counts[int(b)] = counts.get(int(b), 0) + 1
    out = np.empty(len(eval_labels), dtype=np.int64)
    for i, b in enumerate(label_bins(eval_labels, spec.bin_hours)):
        c = counts.get(int(b), 0)
        if c >= spec.n_high:
            out[i] = SHOT_HIGH
        elif c < spec.n_low:
            out[i] = SHOT_LOW
        else:
            out[i] = SHOT_MID
    return out


def balanced_resample(orders: Orders, spec: ShotSpec, seed: int = 0) -> Orders:
    """Subsample every occupied label bin down to the smallest occupied count."""
    bins = label_bins(orders.delivery_hours, spec.bin_hours)
    uniq, counts = np.unique(bins, return_counts=True)
    target = int(counts.min())
    rng = np.random.default_rng(seed)
    keep = []
    for b in uniq:
        idx = np.nonzero(bins == b)[0]
        keep.append(rng.choice(idx, size=target, replace=False))
    keep = np.sort(np.concatenate(keep))
    return orders.subset(keep)


def config_from_dict(d: dict) -> GeneratorConfig:
    """Build a GeneratorConfig from a plain dict, rejecting unknown keys."""
    known = {f.name for f in fields(GeneratorConfig)}
    bad = set(d) - known
    if bad:
        raise ValueError(f"unknown generator option(s): {sorted(bad)}")
    return replace(GeneratorConfig(), **d)
