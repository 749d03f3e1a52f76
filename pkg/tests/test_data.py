import math

import numpy as np
import pytest

from dgm_dte.data import (
    SHOT_HIGH,
    SHOT_LOW,
    SHOT_MID,
    GeneratorConfig,
    Orders,
    ShotSpec,
    SplitSpec,
    balanced_resample,
    config_from_dict,
    generate_orders,
    label_bins,
    read_orders_csv,
    shot_labels,
    split_orders,
    write_orders_csv,
)


def _toy_orders(payment_ts, hours=None):
    n = len(payment_ts)
    z = np.zeros(n)
    return Orders(
        order_id=np.arange(n, dtype=np.int64),
        merchant_id=np.zeros(n, dtype=np.int64),
        sender_id=np.zeros(n, dtype=np.int64),
        receiver_id=np.zeros(n, dtype=np.int64),
        payment_ts=np.asarray(payment_ts, dtype=np.int64),
        origin_x=z.copy(),
        origin_y=z.copy(),
        dest_x=z.copy(),
        dest_y=z.copy(),
        delivery_hours=np.asarray(hours, dtype=np.float64) if hours is not None else z.copy(),
    )


# -- generator ----------------------------------------------------------------


def test_generator_deterministic():
    cfg = GeneratorConfig(n_orders=500, seed=11)
    a, b = generate_orders(cfg), generate_orders(cfg)
    assert a.delivery_hours.tobytes() == b.delivery_hours.tobytes()
    assert a.payment_ts.tobytes() == b.payment_ts.tobytes()
    c = generate_orders(GeneratorConfig(n_orders=500, seed=12))
    assert a.delivery_hours.tobytes() != c.delivery_hours.tobytes()


def test_generator_bulk_mean_without_tails():
    # With the tail turned off, hours = lognormal bulk + additive effects.
    # The only effect with nonzero mean is 0.02 * route distance, which is
    # observable from the emitted coordinates; the rest average out to ~0.
    cfg = GeneratorConfig(n_orders=20000, tail_weight=0.0, seed=123)
    orders = generate_orders(cfg)
    route = np.hypot(orders.origin_x - orders.dest_x, orders.origin_y - orders.dest_y)
    bulk_mean = orders.delivery_hours.mean() - 0.02 * route.mean()
    expected = cfg.bulk_median_hours * math.exp(cfg.bulk_log_sigma**2 / 2.0)
    assert abs(bulk_mean - expected) < 2.5
    # nothing anywhere near the Pareto regime
    assert orders.delivery_hours.max() < 300.0


def test_generator_tail_fraction_near_nominal():
    orders = generate_orders(GeneratorConfig(n_orders=20000, seed=7))
    frac = float((orders.delivery_hours > 96.0).mean())
    assert 0.05 < frac < 0.15


def test_generator_tail_is_merchant_driven():
    orders = generate_orders(GeneratorConfig(n_orders=20000, seed=7))
    rates = []
    for m in np.unique(orders.merchant_id):
        sub = orders.delivery_hours[orders.merchant_id == m]
        rates.append((sub > 96.0).mean())
    rates = np.array(rates)
    assert rates.max() > 0.5
    assert np.median(rates) < 0.1


def test_generator_fixed_site_coordinates():
    orders = generate_orders(GeneratorConfig(n_orders=2000, seed=3))
    for sid in np.unique(orders.sender_id):
        xs = orders.origin_x[orders.sender_id == sid]
        assert np.all(xs == xs[0])
    assert orders.origin_x.min() >= 0.0
    assert orders.origin_x.max() <= 500.0
    assert orders.delivery_hours.min() >= 1.0


def test_generator_rejects_empty():
    with pytest.raises(ValueError, match="n_orders"):
        generate_orders(GeneratorConfig(n_orders=0))


def test_config_from_dict_rejects_unknown():
    cfg = config_from_dict({"n_orders": 5, "seed": 2})
    assert cfg.n_orders == 5 and cfg.seed == 2
    with pytest.raises(ValueError, match="typo_key"):
        config_from_dict({"typo_key": 1})


# -- csv ------------------------------------------------------------------------


def test_csv_round_trip_exact(tmp_path):
    orders = generate_orders(GeneratorConfig(n_orders=200, seed=5))
    path = tmp_path / "orders.csv"
    write_orders_csv(path, orders)
    back = read_orders_csv(path)
    for col in (
        "order_id",
        "merchant_id",
        "payment_ts",
        "origin_x",
        "dest_y",
        "delivery_hours",
    ):
        np.testing.assert_array_equal(getattr(back, col), getattr(orders, col))
    # rewriting is byte-identical
    path2 = tmp_path / "orders2.csv"
    write_orders_csv(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_csv_header_line(tmp_path):
    path = tmp_path / "orders.csv"
    write_orders_csv(path, generate_orders(GeneratorConfig(n_orders=3, seed=1)))
    first = path.read_text().splitlines()[0]
    assert first == (
        "order_id,merchant_id,sender_id,receiver_id,payment_ts,"
        "origin_x,origin_y,dest_x,dest_y,delivery_hours"
    )


def test_csv_bad_inputs(tmp_path):
    good = "order_id,merchant_id,sender_id,receiver_id,payment_ts,origin_x,origin_y,dest_x,dest_y,delivery_hours\n"
    p = tmp_path / "bad.csv"

    p.write_text("order_id,stuff\n")
    with pytest.raises(ValueError, match="header"):
        read_orders_csv(p)

    p.write_text(good + "1,2,3\n")
    with pytest.raises(ValueError, match="row 2"):
        read_orders_csv(p)

    p.write_text(good + "1,2,3,4,5,6,7,8,9,10\n" + "1,2,3,4,5,6,7,8,9,oops\n")
    with pytest.raises(ValueError, match="row 3.*oops"):
        read_orders_csv(p)

    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_orders_csv(p)


# -- splits ---------------------------------------------------------------------


def test_split_boundaries_go_to_later_block():
    day = 86400
    ts = [0, 21 * day - 1, 21 * day, 25 * day - 1, 25 * day, 30 * day - 1]
    orders = _toy_orders(ts)
    train, val, test = split_orders(orders, SplitSpec(21, 4, 5))
    assert list(train.payment_ts) == [0, 21 * day - 1]
    assert list(val.payment_ts) == [21 * day, 25 * day - 1]
    assert list(test.payment_ts) == [25 * day, 30 * day - 1]


def test_split_partitions_generated_span():
    orders = generate_orders(GeneratorConfig(n_orders=3000, span_days=30, seed=2))
    train, val, test = split_orders(orders, SplitSpec(21, 4, 5))
    assert len(train) + len(val) + len(test) == len(orders)
    assert len(train) > len(val) > 0 and len(test) > 0


# -- shot binning ----------------------------------------------------------------


def test_shot_labels_hand_case():
    train = np.array([5.0] * 150 + [17.0] * 50 + [29.0] * 10)
    ev = np.array([3.0, 15.0, 27.0, 39.0])
    out = shot_labels(train, ev, ShotSpec(bin_hours=12.0, n_high=100, n_low=20))
    np.testing.assert_array_equal(out, [SHOT_HIGH, SHOT_MID, SHOT_LOW, SHOT_LOW])


def test_shot_label_thresholds_are_inclusive_exclusive():
    spec = ShotSpec(bin_hours=12.0, n_high=100, n_low=20)
    train = np.array([5.0] * 100 + [17.0] * 20 + [29.0] * 19)
    out = shot_labels(train, np.array([5.0, 17.0, 29.0]), spec)
    np.testing.assert_array_equal(out, [SHOT_HIGH, SHOT_MID, SHOT_LOW])


def test_label_bins():
    np.testing.assert_array_equal(
        label_bins(np.array([0.0, 11.9, 12.0, 47.9, 300.0]), 12.0), [0, 0, 1, 3, 25]
    )


def test_balanced_resample():
    hours = [1.0] * 10 + [13.0] * 4 + [25.0] * 7
    orders = _toy_orders(np.zeros(len(hours), dtype=np.int64), hours)
    spec = ShotSpec(bin_hours=12.0)
    out = balanced_resample(orders, spec, seed=9)
    assert len(out) == 12
    bins, counts = np.unique(label_bins(out.delivery_hours, 12.0), return_counts=True)
    np.testing.assert_array_equal(counts, [4, 4, 4])
    assert len(np.unique(out.order_id)) == len(out)
    again = balanced_resample(orders, spec, seed=9)
    np.testing.assert_array_equal(out.order_id, again.order_id)


def test_tail_rate_solver_hits_marginal_despite_cap():
    from dgm_dte.data import _solve_tail_rates

    mult = np.ones(50)
    mult[:4] = 100.0
    for target in (0.05, 0.08, 0.3, 0.6):
        rates = _solve_tail_rates(mult, target)
        assert rates.mean() == pytest.approx(target, abs=1e-10)
        assert rates.max() <= 0.95 and rates.min() >= 0.0
    # risky merchants saturate before the plain rescale would put them there
    assert _solve_tail_rates(mult, 0.3)[:4].max() == pytest.approx(0.95)


def test_tail_rate_solver_rejects_unreachable_target():
    from dgm_dte.data import _solve_tail_rates

    with pytest.raises(ValueError, match="below 0.95"):
        _solve_tail_rates(np.ones(3), 0.97)
    np.testing.assert_array_equal(_solve_tail_rates(np.ones(3), 0.0), np.zeros(3))
