import io

import numpy as np
import pytest

from taxiplay.demand import (CategoricalDistribution, DemandError, DemandModel, RequestLog, ScriptedArrivals,
                             TABLE_ETA, eta_distribution, estimate_eta, estimate_location_dist, load_model,
                             load_request_log, minute_rng, model_to_text, sample_minute, save_request_log,
                             table_model, uniform_nodes)
from taxiplay.dynamics import Request


def log_from_counts(counts):
    """One request per unit count at minute k (pickup 0, dropoff 1)."""
    return RequestLog([(k, 0, 1) for k, c in enumerate(counts, 1) for _ in range(c)])


def test_eta_empty_log():
    d = estimate_eta(RequestLog([]), 60)
    assert d.prob(0) == 1.0


def test_eta_low_row():
    d = estimate_eta(log_from_counts([1, 0, 1, 0, 1] + [0] * 55), 60)
    assert d.prob(0) == pytest.approx(0.95, abs=1e-12)
    assert d.prob(1) == pytest.approx(0.05, abs=1e-12)


def test_eta_high_hand_count():
    counts = [0] * 49 + [1] * 4 + [2] * 4 + [3, 4, 6]
    d = estimate_eta(log_from_counts(counts), 60)
    want = np.array([49, 4, 4, 1, 1, 0, 1]) / 60
    assert np.allclose(d.probs, want, atol=1e-12)
    assert np.allclose(np.round(d.probs, 4), [0.8167, 0.0667, 0.0667, 0.0167, 0.0167, 0, 0.0167])


def test_eta_rejects_overfull_minute():
    with pytest.raises(DemandError, match="minute 2"):
        estimate_eta(log_from_counts([0, 7]), 10)


def test_location_smoothing_examples():
    log = RequestLog([(1, 0, 1), (1, 0, 1), (2, 1, 0), (3, 3, 0)])
    d = estimate_location_dist(log, 4, "pickup")
    assert np.allclose(d.probs, [0.45, 0.25, 0.05, 0.25])
    assert estimate_location_dist(RequestLog([]), 4, "pickup").probs.tolist() == [0.25] * 4
    log2 = RequestLog([(1, 0, 1)] * 10)
    assert np.allclose(estimate_location_dist(log2, 2, "pickup").probs, [10.5 / 11, 0.5 / 11])


def test_location_rejects_unknown_node():
    with pytest.raises(DemandError):
        estimate_location_dist(RequestLog([(1, 5, 0)]), 4, "pickup")


def test_zero_demand_samples_nothing():
    dm = DemandModel(eta_distribution([1.0]), uniform_nodes(4), uniform_nodes(4))
    assert sample_minute(dm, minute_rng(0, 1), 1) == []


def test_sampling_is_deterministic_and_valid():
    dm = table_model("high", 9)
    a = sample_minute(dm, minute_rng(7, 3), 3)
    b = sample_minute(dm, minute_rng(7, 3), 3)
    assert a == b
    assert all(r.pickup != r.dropoff and r.arrival == 3 for r in a)


def test_medium_frequency():
    dm = table_model("medium", 25)
    counts, _, _ = dm.sample_batch(np.random.default_rng(1), 1, 1, 100_000)
    assert abs((counts == 1).mean() - 0.15) < 0.01


def test_batch_dropoffs_differ_from_pickups():
    dm = table_model("high", 4)
    counts, pu, do = dm.sample_batch(np.random.default_rng(3), 500, 1, 5)
    assert (pu != do).all()


def test_model_round_trip():
    for label in TABLE_ETA:
        dm = table_model(label, 6)
        assert load_model(io.StringIO(model_to_text(dm))) == dm


def test_model_rejects_bad_sum_and_empty_support():
    text = "LABEL x\nETA\n0 0.999\nPICKUP\n0 0.5\n1 0.5\nDROPOFF\n0 0.5\n1 0.5\n"
    with pytest.raises(DemandError):
        load_model(io.StringIO(text))
    with pytest.raises(DemandError):
        CategoricalDistribution((), [])
    with pytest.raises(DemandError):
        load_model(io.StringIO("LABEL x\nETA\nPICKUP\n0 1\nDROPOFF\n0 1\n"))


def test_serialized_probabilities_keep_precision():
    p = 1 / 3
    dist = CategoricalDistribution((0, 1, 2), [p, p, 1 - 2 * p])
    dm = DemandModel(dist, uniform_nodes(3), uniform_nodes(3), "thirds")
    assert load_model(io.StringIO(model_to_text(dm))).eta == dist


def test_request_log_csv_round_trip():
    log = RequestLog([(3, 1, 2), (1, 0, 4)])
    buf = io.StringIO()
    save_request_log(log, buf)
    again = load_request_log(io.StringIO(buf.getvalue()))
    assert again.entries == [(1, 0, 4), (3, 1, 2)]


def test_request_log_window_rebases():
    log = RequestLog([(59, 0, 1), (61, 0, 1), (120, 1, 0), (121, 1, 0)])
    assert log.window(61, 60).entries == [(1, 0, 1), (60, 1, 0)]


def test_scripted_arrivals_batch():
    sa = ScriptedArrivals.from_requests([Request(0, 1, 2), Request(1, 0, 2)])
    counts, pu, do = sa.sample_batch(None, 3, 1, 2)
    assert counts.tolist() == [[0, 2]] * 3
    assert pu[0, 1].tolist() == [0, 1]
