import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from mkstream import _kernels as K
from mkstream.config import SimConfig, Strategy
from mkstream.sim_engine import (
    Event,
    EventKind,
    FeedbackController,
    Simulation,
    collect_metrics,
    dispatch_request,
    dispatch_times,
    draw_arrivals,
    feedback_tick,
    network_step,
    run_simulation,
    simulate,
    zipf_weights,
)
from mkstream.replication import ServerState
from mkstream.stream_model import build_gop_template

SMALL = dict(t_sim=30.0, nb_measure=15, nb_gop=20, nb_video=10, nb_vs=5, nb_p=3)


# -- arrivals ----------------------------------------------------------------

def test_draw_arrivals_zero_rate():
    assert len(draw_arrivals(0.0, 100.0, np.random.default_rng(0))) == 0
    with pytest.raises(ValueError):
        draw_arrivals(-1.0, 10.0, np.random.default_rng(0))


def test_draw_arrivals_poisson_count():
    rng = np.random.default_rng(1)
    counts = [len(draw_arrivals(2.0, 100.0, rng)) for _ in range(300)]
    # Poisson(200): the mean of 300 draws sits within 4 standard errors
    assert abs(np.mean(counts) - 200) < 4 * math.sqrt(200 / 300)
    assert np.var(counts) == pytest.approx(200, rel=0.25)
    t = draw_arrivals(1.5, 50.0, np.random.default_rng(2))
    assert np.all(np.diff(t) > 0) and t[-1] < 50.0


def test_zipf_weights():
    w = zipf_weights(10, 1.3)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w) < 0)
    assert np.allclose(zipf_weights(4, 0.0), 0.25)


# -- dispatch times and link ------------------------------------------------------

def naive_dispatch(groups, release, rate, free):
    out, last = [], {}
    for g, r, mu, f in zip(groups, release, rate, free):
        t = max(r, last.get(g, -math.inf), f) + 1 / mu
        last[g] = t
        out.append(t)
    return np.array(out)


@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 10), st.sampled_from([1.0, 2.5, 30.0])), min_size=1, max_size=40),
       st.floats(0, 5))
def test_dispatch_times_matches_loop(rows, free0):
    rows.sort(key=lambda r: r[0])
    groups = np.array([r[0] for r in rows])
    release = np.array([r[1] for r in rows])
    rate = np.array([{0: 1.0, 1: 2.5, 2: 30.0, 3: 7.0}[g] for g in groups])
    free = np.full(len(rows), free0)
    assert np.allclose(dispatch_times(groups, release, rate, free), naive_dispatch(groups, release, rate, free))


def offered(n, labels=None):
    return np.zeros(n), np.array(labels if labels is not None else [2] * n, dtype=np.int8)


def test_network_step_within_capacity():
    arrive, lab = offered(10)
    out = network_step(arrive, lab, 10.0, 1.0, 0.0, 0, 0.0, Strategy.BASELINE, np.random.default_rng(0))
    assert out.departed.sum() == 10 and not out.overflow.any()


def test_network_step_baseline_drops_any_frame():
    lab = np.array([0, 2, 2, 1, 2, 2, 1, 2, 2, 1, 2, 0], dtype=np.int8)
    hit_i = False
    for seed in range(60):
        out = network_step(np.zeros(12), lab, 10.0, 1.0, 0.0, 0, 0.0, Strategy.BASELINE, np.random.default_rng(seed))
        assert out.overflow.sum() == 2 and out.departed.sum() == 10
        hit_i |= bool(out.overflow[lab == 0].any())
    assert hit_i


def test_network_step_priority_drops_optional_first():
    lab = np.array([0, 2, 2, 1, 2, 2, 1, 2, 2, 1, 2, 0], dtype=np.int8)
    out = network_step(np.zeros(12), lab, 10.0, 1.0, 0.0, 0, 0.0, Strategy.MK_KFRAMES, np.random.default_rng(0))
    assert out.overflow.sum() == 2
    assert np.all(lab[out.overflow] == 2)
    # only M frames left: they go too
    lab = np.zeros(12, dtype=np.int8)
    out = network_step(np.zeros(12), lab, 10.0, 1.0, 0.0, 0, 0.0, Strategy.MK, np.random.default_rng(0))
    assert out.overflow.sum() == 2


def test_network_step_buffer_holds_excess():
    arrive, lab = offered(12)
    out = network_step(arrive, lab, 10.0, 1.0, 0.0, 5, 0.0, Strategy.MK, np.random.default_rng(0))
    assert out.departed.sum() == 10 and out.overflow.sum() == 0
    assert out.free_after == pytest.approx(1.0)


@settings(max_examples=150, suppress_health_check=[HealthCheck.too_slow])
@given(
    st.lists(st.tuples(st.floats(0, 1), st.integers(0, 2), st.floats(0, 2)), min_size=1, max_size=40),
    st.sampled_from([5.0, 12.0, 40.0]),
    st.integers(0, 6),
    st.sampled_from([0.0, 0.3]),
    st.sampled_from(list(Strategy)),
    st.integers(0, 2**32 - 1),
)
def test_link_kernel_matches_reference(rows, rate, buffer, p_loss, strategy, seed):
    rows.sort(key=lambda r: r[0])
    n = len(rows)
    arr = np.array([r[0] for r in rows])
    lab = np.array([r[1] for r in rows], dtype=np.int8)
    dl = np.array([r[0] + r[2] for r in rows])
    ref = network_step(arr, lab, rate, 1.0, 0.0, buffer, p_loss, strategy, np.random.default_rng(seed))

    fate = np.zeros(n, dtype=np.int8)
    fate_time = np.full(n, np.inf)
    free = np.zeros(1)
    keep = K.link_tick(1.0, np.arange(n), arr, dl, lab, np.zeros(n, dtype=np.int64), rate, free, buffer,
                       strategy is Strategy.BASELINE, p_loss, np.random.default_rng(seed).random(2 * n), 0.5,
                       fate, fate_time, np.zeros(1, dtype=np.int64), np.zeros(5, dtype=np.int64))
    held = ~ref.departed & ~ref.overflow
    assert np.array_equal(np.sort(keep), np.flatnonzero(held))
    assert np.array_equal(fate == K.NET_DROP, ref.overflow)
    assert np.array_equal(fate == K.RANDOM_LOSS, ref.random_loss)
    ok = ref.departed & ~ref.random_loss
    assert np.array_equal(fate == K.RECEIVED, ok & (ref.depart <= dl + 1e-9))
    assert free[0] == pytest.approx(ref.free_after)


@given(
    st.lists(st.tuples(st.integers(0, 2), st.floats(0, 1)), min_size=1, max_size=40),
    st.lists(st.floats(0, 1.5), min_size=3, max_size=3),
)
def test_server_kernel_matches_reference(rows, free0):
    rows.sort()
    n = len(rows)
    srv = np.array([r[0] for r in rows], dtype=np.int64)
    rel = np.array([r[1] for r in rows])
    rates = np.array([4.0, 10.0, 25.0])
    free = np.array(free0)
    t0, t1 = 0.5, 1.5
    status = np.zeros(n, dtype=np.int8)
    done = np.zeros(n)
    K.serve_queue(srv, rel, np.full(n, np.inf), np.full(n, 2, dtype=np.int8), np.zeros(n, dtype=np.int64), rates,
                  free.copy(), t0, t1, False, False, np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64),
                  status, done)
    ref = dispatch_times(srv, rel, rates[srv], np.maximum(free[srv], t0))
    expect = ref <= t1 + 1e-9
    assert np.array_equal(status == K.SERVED, expect)
    assert np.allclose(done[expect], ref[expect])


@given(st.lists(st.tuples(st.integers(0, 4), st.lists(st.integers(0, 6), max_size=10)), max_size=15), st.randoms())
def test_merge_runs_matches_lexsort(runs, rnd):
    keys, srvs, starts, ends = [], [], [], []
    for srv, ks in runs:
        starts.append(len(keys))
        keys.extend(sorted(k / 2 for k in ks))
        ends.append(len(keys))
        srvs.append(srv)
    n = len(keys)
    gid = list(range(n))
    rnd.shuffle(gid)
    key, gid = np.array(keys, dtype=float), np.array(gid)
    # each run must be sorted by (key, gid)
    for a, b in zip(starts, ends):
        seg = np.lexsort((gid[a:b], key[a:b]))
        key[a:b], gid[a:b] = key[a:b][seg], gid[a:b][seg]
    srv = np.repeat(np.array(srvs, dtype=np.int64), np.array(ends) - np.array(starts)) if runs else np.empty(0, np.int64)
    order = K.merge_runs(key, gid, np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64),
                         np.array(srvs, dtype=np.int64), 5)
    assert np.array_equal(order, np.lexsort((gid, key, srv)))


# -- useful frames ---------------------------------------------------------------

def useful_oracle(classes, rec):
    """Decode rule as stated: P needs I and every earlier P; B needs I and the P chain before it."""
    out = []
    for j, c in enumerate(classes):
        gop_start = j - j % len(TEMPLATE)
        refs = [x for x in range(gop_start, j) if classes[x] in "IP"]
        out.append(rec[j] and all(rec[x] for x in refs))
    return out


TEMPLATE = str(build_gop_template(3, 2))


@given(st.lists(st.booleans(), min_size=24, max_size=24))
def test_bucket_counts_useful_rule(rec):
    nf = 24
    fate = np.where(rec, K.RECEIVED, K.NET_DROP).astype(np.int8)
    is_ref = np.array([c in "IP" for c in TEMPLATE])
    rows = K.bucket_counts(np.zeros(1), np.ones(1), np.array([nf]), nf, 12, is_ref, fate, np.zeros(nf),
                           np.zeros(nf, bool), np.zeros(nf, bool), 100.0, 100.0, 1)
    classes = TEMPLATE * 2
    assert rows[2, 0] == sum(useful_oracle(classes, rec))
    assert rows[1, 0] == sum(rec)


def test_lost_i_frame_spoils_its_gop():
    rec = [True] * 24
    rec[0] = False
    assert sum(useful_oracle(TEMPLATE * 2, rec)) == 12


# -- metrics -----------------------------------------------------------------

def test_collect_metrics_empty():
    s = collect_metrics({}, 3)
    assert s.bucket_index == 3
    assert all(s.rate(m) == 0 for m in ("received", "useful", "lost", "waiting", "served"))


def test_lambda_zero_is_quiescent():
    sim = Simulation(SimConfig(lam=0.0, **SMALL))
    res = sim.run()
    assert res.event_counts == {}
    assert all(s.sent == 0 and s.received_rate == 0 for s in res.samples)


def test_bucket_interval():
    cfg = SimConfig(t_sim=100.0, nb_measure=100, lam=0.0)
    assert cfg.bucket_width == 1.0
    assert len(run_simulation(cfg)) == 100


def test_single_stream_is_fully_received():
    cfg = SimConfig(strategy=Strategy.BASELINE, p_loss=0.0, **SMALL)
    res = simulate(cfg, requests=[(0.0, 0)])
    busy = [s for s in res.samples if s.sent]
    assert busy and all(s.received_rate == 1.0 and s.useful_rate == 1.0 for s in busy)


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(list(Strategy)), st.floats(0.2, 2.0), st.integers(0, 10_000), st.sampled_from([0.0, 0.05]))
def test_conservation_and_order(strategy, lam, seed, p_loss):
    res = simulate(SimConfig(strategy=strategy, lam=lam, seed=seed, p_loss=p_loss, **SMALL))
    for s in res.samples:
        assert s.sent == s.received + s.lost + s.in_flight
        assert s.in_flight >= 0
        assert s.useful <= s.received <= s.sent
        assert s.lost == s.lost_policy + s.lost_network + s.lost_random + s.lost_late


def test_determinism():
    cfg = SimConfig(lam=1.5, seed=11, strategy=Strategy.MK_KFRAMES_REPL, **SMALL)
    a, b = simulate(cfg), simulate(cfg)
    assert a.samples == b.samples and a.trace_digest == b.trace_digest and a.totals == b.totals


def test_server_limits_respected():
    sim = Simulation(SimConfig(lam=2.0, seed=4, strategy=Strategy.MK_KFRAMES_REPL, **SMALL))
    sim.run()
    assert sim.srv_rate.max() <= sim.cfg.beta + 1e-9
    assert all(s.stored <= s.capacity_c for s in sim.servers)


def test_event_priorities():
    kinds = [EventKind.MEASURE_BUCKET_CLOSE, EventKind.REQUEST_ARRIVAL, EventKind.SAMPLING_TICK,
             EventKind.REPLICATION_COMPLETE, EventKind.FRAME_RELEASE, EventKind.FRAME_DELIVERY]
    events = sorted(Event(1.0, k, j) for j, k in enumerate(kinds))
    assert [e.kind for e in events] == sorted(kinds)
    assert Event(1.0, EventKind.REQUEST_ARRIVAL, 5) < Event(1.0, EventKind.REQUEST_ARRIVAL, 6)


# -- dispatch ----------------------------------------------------------------

def ring(n=5, speed=100.0):
    servers = [ServerState(j, speed, 3, tm_service=10.0) for j in range(n)]
    servers[0].catalog.add("v1")
    return servers


def test_dispatch_idle_holder():
    assert dispatch_request("v1", 30.0, ring(), 0.0, False).server == 0


def test_dispatch_replicates_to_idle_neighbor():
    servers = ring()
    servers[0].committed_rate = 90.0
    out = dispatch_request("v1", 30.0, servers, 0.0, True)
    assert out.action == "replicate" and out.source == 0 and out.server in (1, 4)


def test_dispatch_waits_when_all_saturated():
    servers = ring()
    for s in servers:
        s.committed_rate = 90.0
    assert dispatch_request("v1", 30.0, servers, 0.0, True).action == "wait"
    assert dispatch_request("v1", 30.0, servers, 0.0, False).action == "wait"
    assert dispatch_request("nope", 30.0, servers, 0.0, True).action == "reject"


def test_waiting_request_rejected_after_tm_service():
    cfg = SimConfig(strategy=Strategy.MK, beta=100.0, qos=35.0, tm_service=3.0, **SMALL)
    sim = Simulation(cfg, requests=[(0.0, 0), (0.0, 0), (0.0, 0)])
    res = sim.run()
    assert res.totals["admitted"] == 2 and res.totals["rejected_requests"] == 1
    nf = cfg.nb_gop * 12
    assert res.totals["sent"] == 3 * nf


# -- feedback ----------------------------------------------------------------

CTRL = FeedbackController(build_gop_template(3, 2), restore_periods=2)


def test_feedback_grants_follow_apportion():
    grants, *_ = feedback_tick(CTRL, [(0, 40.0), (1, 30.0), (2, 20.0)], np.full(3, 12), np.zeros(3, int), 75.0, 150.0)
    assert grants == {0: 33, 1: 25, 2: 17}


def test_feedback_degrades_congested_session():
    sessions = [(0, 30.0), (1, 30.0)]
    _, levels, _, sets = feedback_tick(CTRL, sessions, np.full(2, 12), np.zeros(2, int), 40.0, 150.0)
    assert np.all(levels < 12)
    assert all(cs.b.m < cs.b.k for cs in sets)


def test_feedback_restores_with_headroom():
    levels, quiet = np.full(2, 3), np.zeros(2, int)
    history = []
    for _ in range(8):
        _, levels, quiet, sets = feedback_tick(CTRL, [(0, 30.0), (1, 30.0)], levels, quiet, 1000.0, 150.0)
        history.append(levels.copy())
    assert np.all(history[-1] == 12) and all(cs.is_full() for cs in sets)
    assert all(np.all(b >= a) for a, b in zip(history, history[1:]))


def test_feedback_miss_blocks_climb():
    levels, quiet = np.full(1, 3), np.zeros(1, int)
    for _ in range(5):
        _, levels, quiet, _ = feedback_tick(CTRL, [(0, 30.0)], levels, quiet, 1000.0, 150.0, miss=np.array([True]))
    assert levels[0] == 3


def test_controller_ladder():
    # p_floor=1 keeps one P frame beside the I frame at the lowest levels
    assert [int(CTRL.kept[T]) for T in range(1, 13)] == [max(T, 2) for T in range(1, 13)]
    assert not CTRL.drop_mask[12].any()
    for T in range(1, 13):
        assert not CTRL.drop_mask[T, 0]
        assert CTRL.drop_mask[T].sum() == 12 - CTRL.kept[T]
