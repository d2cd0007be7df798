import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moetune.analytics import (
    ExpertHistogram, default_layers, entropy, export_report, expert_frequency, read_report_csv,
    route_examples, specialization_report, underutilized_experts, validate_report,
)
from moetune.data import synth_dataset
from moetune.model import LayerRouting, RoutingTrace, desk_config, MoETransformer


def rec(top1, layer=0, E=4):
    top1 = np.asarray(top1, dtype=np.int64)
    T = top1.size
    idx = np.stack([top1, (top1 + 1) % E], axis=1)
    logits = np.zeros((T, E))
    logits[np.arange(T), top1] = 1.0
    return LayerRouting(layer, idx, np.full((T, 2), 0.5), logits, np.arange(T), np.ones(T, bool))


def traces(top1, layer=0, E=4):
    return list(rec(top1, layer, E).traces())


def test_all_to_expert_zero():
    h = expert_frequency([rec([0] * 6, E=8)], 0)
    assert h.frequencies.tolist() == [1.0] + [0.0] * 7


def test_round_robin_uniform():
    h = expert_frequency([rec(np.arange(40) % 8, E=8)], 0)
    assert np.all(h.frequencies == 1 / 8)


def test_hand_counts():
    h = expert_frequency(traces([0, 0, 0, 1]), 0)
    assert h.frequencies.tolist() == [0.75, 0.25, 0.0, 0.0]
    assert h.n_tokens == 4


def test_per_token_traces_and_records_agree():
    top1 = [2, 3, 3, 1, 0, 3]
    assert expert_frequency(traces(top1), 0).counts.tolist() == expert_frequency([rec(top1)], 0).counts.tolist()


def test_invalid_rows_ignored():
    r = rec([0, 1, 1, 1])
    r = r.select(np.array([True, True, False, False]))
    assert expert_frequency([r], 0).counts.tolist() == [1, 1, 0, 0]


def test_missing_layer():
    with pytest.raises(ValueError):
        expert_frequency([rec([0, 1])], 3)


def test_trace_argmax_is_first_expert():
    t = RoutingTrace(0, 0, [3, 1], [0.6, 0.4], [0.0, 1.0, 0.0, 2.0])
    assert t.argmax == 3


# ---------------------------------------------------------------- report


def test_identical_routing_overlap_all_two():
    rep = specialization_report({"a": [rec([0, 0, 1])], "b": [rec([0, 0, 1])], "c": [rec([0, 0, 1])]}, [0])
    assert np.all(rep.overlap(0) == 2)


def test_disjoint_pairs_zero_off_diagonal():
    rep = specialization_report({"a": [rec([0, 0, 1], E=4)], "b": [rec([2, 2, 3], E=4)]}, [0])
    ov = rep.overlap(0)
    assert ov[0, 1] == ov[1, 0] == 0
    assert ov[0, 0] == 2


def test_uniform_entropy_is_log_e():
    h = ExpertHistogram(0, np.ones(8, dtype=np.int64))
    assert h.entropy == pytest.approx(math.log(8))


def test_dominant_ties_to_lower_index():
    assert ExpertHistogram(0, np.array([1, 3, 3, 0])).dominant() == (1, 2)
    assert ExpertHistogram(0, np.array([0, 0, 0, 0, 1])).dominant() == (4, 0)


def test_report_needs_two_classes_and_tokens():
    with pytest.raises(ValueError):
        specialization_report({"a": [rec([0])]}, [0])
    with pytest.raises(ValueError):
        specialization_report({"a": [rec([0])], "b": [rec([0], layer=1)]}, [0])


@settings(max_examples=50)
@given(st.lists(st.integers(0, 100), min_size=4, max_size=8).filter(lambda c: sum(c) > 0))
def test_histogram_probability_vector_and_entropy_bounds(counts):
    h = ExpertHistogram(0, np.array(counts))
    assert h.frequencies.sum() == pytest.approx(1.0, abs=1e-6)
    assert -1e-12 <= h.entropy <= math.log(len(counts)) + 1e-12
    p, s = h.dominant()
    assert p != s


@settings(max_examples=50)
@given(st.lists(st.integers(0, 50), min_size=4, max_size=8).filter(lambda c: sum(c) > 0))
def test_entropy_drops_when_mass_moves_to_top_two(counts):
    c = np.array(counts)
    h = ExpertHistogram(0, c)
    p, s = h.dominant()
    moved = np.zeros_like(c)
    rest = c.sum() - c[p] - c[s]
    moved[p] = c[p] + rest
    moved[s] = c[s]
    assert entropy(moved / moved.sum()) <= h.entropy + 1e-12


@settings(max_examples=30)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=30), st.randoms())
def test_report_invariant_to_trace_order(top1, rnd):
    a = traces(top1)
    b = list(a)
    rnd.shuffle(b)
    r1 = specialization_report({"x": a, "y": traces([0, 1])}, [0]).to_dict()
    r2 = specialization_report({"x": b, "y": traces([0, 1])}, [0]).to_dict()
    assert r1 == r2


# ---------------------------------------------------------------- utilization


def test_underutilized():
    t = rec([0] * 50 + [1] * 30 + [2] * 15 + [3] * 5)
    assert underutilized_experts([t], 0.1) == [(0, 3)]
    assert underutilized_experts([t], 0.0) == []
    never = rec([0, 1, 2] * 10, E=4)
    assert (0, 3) in underutilized_experts([never], 0.01)
    with pytest.raises(ValueError):
        underutilized_experts([t], 1.0)


def test_default_layers():
    assert default_layers(28) == [0, 14, 27]
    assert default_layers(1) == [0]


# ---------------------------------------------------------------- export


def _report():
    return specialization_report({"reentrancy": [rec([0, 0, 1, 3], E=4), rec([1, 1, 1], layer=1, E=4)],
                                  "timestamp": [rec([2, 2, 3], E=4), rec([0, 3], layer=1, E=4)]}, [0, 1])


def test_csv_round_trip(tmp_path):
    rep = _report()
    p = tmp_path / "r.csv"
    export_report(rep, p, "csv")
    back = read_report_csv(p)
    for cls in rep.classes:
        for layer in rep.layers:
            np.testing.assert_allclose(back[(cls, layer)], rep.histograms[cls][layer].frequencies, atol=1e-6)


def test_empty_report_header_only(tmp_path):
    p = tmp_path / "r.csv"
    export_report(None, p, "csv")
    assert p.read_text().strip() == "class,layer,expert,count,frequency"


def test_json_validates_against_schema(tmp_path):
    p = tmp_path / "r.json"
    export_report(_report(), p, "json")
    payload = json.loads(p.read_text())
    validate_report(payload)
    payload["entries"][0]["dominant"] = [1]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(payload)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        export_report(_report(), tmp_path / "r.txt", "txt")


def test_route_examples_groups_by_type():
    m = MoETransformer(desk_config(n_layers=2, d_model=16, n_heads=2, d_ff=32, total_experts=4), seed=0)
    ds = synth_dataset(8, seed=0)
    grouped = route_examples(m, ds, batch_size=3)
    assert set(grouped) == {"reentrancy", "timestamp", "integer-overflow", "delegatecall"}
    rep = specialization_report(grouped, [0, 1])
    for cls in rep.classes:
        assert rep.histograms[cls][0].n_tokens > 0
