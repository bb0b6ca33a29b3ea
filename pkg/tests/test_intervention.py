import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskneurons.engine import DOUBLE, ZERO
from taskneurons.intervention import build_plan, ratio_sweep, read_plans, sweep_ratios, write_plans
from taskneurons.neurons import NeuronId, NeuronSets


def make_sets(n_good, n_bad, d_ffn=1000):
    good = [(NeuronId(0, i), 1.0 / (i + 1)) for i in range(n_good)]
    bad = [(NeuronId(1, i), -1.0 / (i + 1)) for i in range(n_bad)]
    return NeuronSets(good, bad, frozenset(), 500, max(n_good, n_bad, 1))


def test_pure_good_control():
    p = build_plan(make_sets(100, 100), "enhance", 100, 1.0)
    assert (len(p.selected_good), len(p.selected_bad)) == (100, 0)


def test_rounding_rule():
    p = build_plan(make_sets(100, 100), "degrade", 100, 0.37)
    assert (len(p.selected_good), len(p.selected_bad)) == (37, 63)
    # half rounds up
    p = build_plan(make_sets(10, 10), "degrade", 5, 0.5)
    assert (len(p.selected_good), len(p.selected_bad)) == (3, 2)


def test_shortfall_is_reported_not_refilled():
    p = build_plan(make_sets(30, 200), "enhance", 100, 0.5)
    assert (len(p.selected_good), len(p.selected_bad)) == (30, 50)
    assert p.shortfall == {"good": 20, "bad": 0}


def test_refill_takes_from_the_other_list():
    p = build_plan(make_sets(30, 200), "enhance", 100, 0.5, refill=True)
    assert (len(p.selected_good), len(p.selected_bad)) == (30, 70)
    assert p.shortfall == {"good": 20, "bad": 0}


def test_override_modes_follow_direction():
    sets = make_sets(5, 5)
    up = build_plan(sets, "enhance", 4, 0.5).override_map
    down = build_plan(sets, "degrade", 4, 0.5).override_map
    assert up[NeuronId(0, 0)] == DOUBLE and up[NeuronId(1, 0)] == ZERO
    assert down[NeuronId(0, 0)] == ZERO and down[NeuronId(1, 0)] == DOUBLE


def test_sweep_has_eleven_plans_and_pure_endpoints():
    sets = make_sets(100, 100)
    plans = ratio_sweep(sets, "degrade", 100)
    assert [p.ratio for p in plans] == [i / 10 for i in range(11)]
    assert plans[0].selected_good == () and len(plans[0].selected_bad) == 100
    assert plans[-1].selected_bad == ()


def test_sweep_endpoints_stay_pure_when_a_list_is_empty():
    plans = ratio_sweep(make_sets(8, 0), "degrade", 100)
    assert plans[0].selected_good == () and plans[0].selected_bad == ()
    assert plans[0].shortfall == {"good": 0, "bad": 100}
    assert len(plans[5].selected_good) == 8


def test_sweep_step_must_divide_one():
    assert len(sweep_ratios(0.25)) == 5
    with pytest.raises(ValueError):
        sweep_ratios(0.3)


def test_invalid_plans():
    sets = make_sets(3, 3)
    with pytest.raises(ValueError):
        build_plan(sets, "sideways", 10, 0.5)
    with pytest.raises(ValueError):
        build_plan(sets, "enhance", 10, 1.5)
    with pytest.raises(ValueError):
        build_plan(sets, "enhance", 0, 0.5)
    with pytest.raises(ValueError):
        build_plan(NeuronSets([], []), "enhance", 10, 0.5)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 80), st.integers(0, 10), st.booleans(),
       st.sampled_from(["enhance", "degrade"]))
def test_plan_invariants(n_good, n_bad, budget, tenths, refill, direction):
    if n_good == n_bad == 0:
        return
    sets = make_sets(n_good, n_bad)
    r = tenths / 10
    p = build_plan(sets, direction, budget, r, refill)
    assert len(p.selected_good) + len(p.selected_bad) <= budget
    assert not set(p.selected_good) & set(p.selected_bad)
    assert set(p.selected_good) <= set(sets.good_ids) and set(p.selected_bad) <= set(sets.bad_ids)
    # selections are list heads
    assert list(p.selected_good) == sets.good_ids[: len(p.selected_good)]
    want_good = int(r * budget + 0.5 + 1e-9)
    if not refill:
        assert len(p.selected_good) == min(want_good, n_good)
        assert len(p.selected_bad) == min(budget - want_good, n_bad)
    else:
        assert len(p.selected_good) + len(p.selected_bad) == min(budget, n_good + n_bad)
        assert len(p.selected_good) >= min(want_good, n_good)
        assert len(p.selected_bad) >= min(budget - want_good, n_bad)
    if r == 0.0 and not refill:
        assert p.selected_good == ()


def test_plan_file_roundtrip(tmp_path):
    plans = ratio_sweep(make_sets(20, 20), "enhance", 10)
    write_plans(tmp_path / "p.json", plans, {"task": "t"})
    back, meta = read_plans(tmp_path / "p.json")
    assert back == plans and meta == {"task": "t"}
