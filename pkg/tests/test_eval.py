import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learncbba.bidding import init_policy
from learncbba.bidding.checkpoint import CheckpointError, quantize, save_policy
from learncbba.consensus import RunConfig
from learncbba.eval import (
    CSV_FIELDS,
    EvalRecord,
    box_plot_data,
    export_report,
    make_validation_sets,
    percent_optimality,
    preset_dataset,
    read_records,
    records_to_csv,
    run_validation,
    summarize,
)
from learncbba.oracle import OracleCache, brute_force

from conftest import EscalatingBidder, make_world


def _rec(eta, bidder="b", n=5, timed_out=False, iterations=3, exact=True, wid=None, d_star=80.0):
    d_hat = 100.0 * d_star / eta if eta else 120.0
    return EvalRecord(
        world_id=wid or f"w{eta}-{iterations}-{timed_out}",
        bidder=bidder,
        n_agents=n,
        n_tasks=10,
        d_star=d_star,
        d_hat=d_hat,
        eta=eta,
        iterations=iterations,
        timed_out=timed_out,
        oracle_exact=exact,
    )


# -- percent optimality ------------------------------------------------------------------------


def test_percent_optimality_examples():
    assert percent_optimality(100.0, 100.0) == 100.0
    assert percent_optimality(80.0, 100.0) == 80.0


@pytest.mark.parametrize("d_star,d_hat", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0), (1.0, -3.0)])
def test_percent_optimality_rejects_nonpositive(d_star, d_hat):
    with pytest.raises(ValueError):
        percent_optimality(d_star, d_hat)


# -- datasets --------------------------------------------------------------------------------


def test_validation_task_ranges():
    sets = make_validation_sets(seed=0, count=1000)
    assert set(sets) == {"val5", "val10", "val15", "val20"}
    for name, n in (("val5", 5), ("val10", 10), ("val15", 15), ("val20", 20)):
        worlds = sets[name]
        assert len(worlds) == 1000
        counts = np.array([w.n_tasks for w in worlds])
        assert all(w.n_agents == n for w in worlds)
        assert counts.min() >= 2 * n and counts.max() <= 4 * n
        assert all(25.0 <= w.workspace_side <= 55.0 for w in worlds)


def test_validation_disjoint_from_training():
    train = preset_dataset("training", 0, 200)
    val = preset_dataset("val5", 0, 200)
    assert not {w.id for w in train} & {w.id for w in val}
    # same seed and ordinal, different stream: the geometry differs too
    train_tasks = {w.tasks.tobytes() for w in train}
    assert not any(w.tasks.tobytes() in train_tasks for w in val)


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_dataset("val7")


# -- run_validation ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def evaluated():
    worlds = preset_dataset("val5", 3, 12)
    worlds = [w for w in worlds if w.n_tasks <= 14][:6]
    policy = init_policy("nam", 0)
    quantize(policy.params)
    cache = OracleCache()
    records = run_validation(worlds, ["classic", policy], oracle_cache=cache)
    return worlds, policy, cache, records


def test_records_ordered_by_world_then_bidder(evaluated):
    worlds, _, _, records = evaluated
    assert [(r.world_id, r.bidder) for r in records] == [(w.id, b) for w in worlds for b in ("classic", "nam")]


def test_eta_recomputes_from_distances(evaluated):
    for r in evaluated[3]:
        if r.eta is not None:
            assert r.eta == pytest.approx(100.0 * r.d_star / r.d_hat, rel=1e-12)


def test_eta_dominated_by_exact_oracle(evaluated):
    for r in evaluated[3]:
        assert r.oracle_exact
        assert r.eta is None or r.eta <= 100.0 + 1e-9


def test_classic_never_times_out(evaluated):
    assert not any(r.timed_out for r in evaluated[3] if r.bidder == "classic")


def test_evaluation_is_deterministic(evaluated):
    worlds, policy, cache, records = evaluated
    again = run_validation(worlds, ["classic", policy], oracle_cache=cache)
    parallel = run_validation(worlds, ["classic", policy], oracle_cache=cache, jobs=2)
    assert again == records == parallel


def test_record_cache_is_reused(evaluated):
    worlds, _, cache, records = evaluated
    planted = _rec(42.0, bidder="classic", wid=worlds[0].id)
    rc = {(worlds[0].id, "classic"): planted}
    out = run_validation(worlds[:2], ["classic"], oracle_cache=cache, record_cache=rc)
    assert out[0] is planted
    assert out[1] == records[2]


def test_corrupt_checkpoint_fails_before_running(tmp_path, evaluated):
    worlds, _, cache, _ = evaluated
    save_policy(tmp_path / "p.json", init_policy("lstm", 0, hidden=4))
    (tmp_path / "p.bin").write_bytes(b"\0\0")
    rc: dict = {}
    with pytest.raises(CheckpointError):
        run_validation(worlds, ["classic", tmp_path / "p.json"], oracle_cache=cache, record_cache=rc)
    assert rc == {}


def test_duplicate_bidder_names(evaluated):
    with pytest.raises(ValueError):
        run_validation(evaluated[0][:1], ["classic", "classic"], oracle_cache=evaluated[2])


def test_induced_timeouts_are_counted_separately():
    w = make_world([[0, 0], [1, 0]], [[2, 0], [5, 5], [3, 1]])
    cache = OracleCache({w.id: brute_force(w)})
    records = run_validation(
        [w], ["classic", ("escalating", EscalatingBidder())], RunConfig(max_iterations=6), oracle_cache=cache
    )
    classic, stuck = records
    assert not classic.timed_out and classic.counted
    assert stuck.timed_out and not stuck.counted and stuck.iterations == 6
    stats = summarize(records)
    g = stats[("escalating", 2)]
    assert g.count == 1 and g.timeouts == 1 and g.eta_count == 0 and g.median_eta is None
    assert stats[("classic", 2)].median_eta == classic.eta


# -- summarize -------------------------------------------------------------------------------


def test_single_record_median():
    assert summarize([_rec(87.5)])[("b", 5)].median_eta == 87.5


def test_median_of_three():
    s = summarize([_rec(80.0), _rec(90.0), _rec(100.0)])[("b", 5)]
    assert s.median_eta == 90.0 and s.min_eta == 80.0 and s.max_eta == 100.0


def test_timeouts_excluded_from_eta():
    s = summarize([_rec(80.0), _rec(90.0), _rec(99.0, timed_out=True, iterations=50)])[("b", 5)]
    assert s.median_eta == 85.0 and s.timeouts == 1 and s.count == 3 and s.max_iterations == 50


def test_groups_and_oracle_labels():
    stats = summarize([_rec(80.0, exact=True), _rec(90.0, exact=False), _rec(85.0, n=10, exact=False)])
    assert stats[("b", 5)].exact_oracle == "mixed"
    assert stats[("b", 10)].exact_oracle == "best_known"
    assert set(stats.to_dict()) == {"b/5", "b/10"}


def test_summarize_needs_records():
    with pytest.raises(ValueError):
        summarize([])


records_strategy = st.lists(
    st.tuples(
        st.one_of(st.none(), st.floats(40.0, 100.0)),
        st.booleans(),
        st.sampled_from(["a", "b"]),
        st.sampled_from([5, 10]),
        st.integers(1, 50),
    ),
    min_size=1,
    max_size=30,
)


@given(records_strategy)
def test_no_record_is_dropped(rows):
    records = [
        _rec(eta, bidder=b, n=n, timed_out=t, iterations=it, wid=f"w{i}") for i, (eta, t, b, n, it) in enumerate(rows)
    ]
    stats = summarize(records)
    assert sum(g.count for g in stats.groups.values()) == len(records)
    for g in stats.groups.values():
        assert g.count == g.timeouts + g.eta_count + g.incomplete


# -- export ------------------------------------------------------------------------------------


def test_empty_records_give_header_only():
    assert records_to_csv([]) == ",".join(CSV_FIELDS) + "\n"


@given(records_strategy)
def test_csv_round_trip_reproduces_summary(tmp_path_factory, rows):
    records = [
        _rec(eta, bidder=b, n=n, timed_out=t, iterations=it, wid=f"w{i}", d_star=math.pi * (i + 1))
        for i, (eta, t, b, n, it) in enumerate(rows)
    ]
    out = tmp_path_factory.mktemp("report")
    paths = export_report(summarize(records), records, out)
    back = read_records(paths["records"])
    assert back == records
    assert summarize(back) == summarize(records)


def test_box_plot_matches_summary():
    records = [_rec(float(x), wid=f"w{x}") for x in (60, 85, 86, 88, 90, 91)] + [_rec(None, timed_out=True, wid="t")]
    stats = summarize(records)[("b", 5)]
    box = box_plot_data(records)["b/5"]["eta"]
    assert (box["q1"], box["median"], box["q3"]) == (stats.q1_eta, stats.median_eta, stats.q3_eta)
    assert box["outliers"] == [60.0]
    assert box["min"] == 85.0 and box["max"] == 91.0


def test_report_files(tmp_path):
    records = [_rec(80.0), _rec(90.0, timed_out=True)]
    paths = export_report(summarize(records), records, tmp_path)
    assert {p.name for p in paths.values()} == {"records.csv", "summary.json", "boxplot.json"}
    assert all(p.exists() for p in paths.values())


def test_report_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    records = [_rec(80.0)]
    with pytest.raises(OSError):
        export_report(summarize(records), records, blocker / "sub")
