"""Discrete-event simulation of the master server, video servers, clients and network.

The event loop runs on continuous timestamps. Frame handling is batched: a
``FRAME_RELEASE`` event at time ``t`` releases, queues, schedules and
transmits every frame whose release time falls in ``[t - tick, t)``, with
per-frame dispatch times computed exactly for a server of a given rate.
Outcomes are accounted per release cohort: a frame belongs to the
measurement bucket of its release time and its fate is read at ``t_sim``.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._kernels import (
    ST_I_OVER,
    ST_I_OVER_OPT,
    ST_I_POLICY,
    ST_PLANNED,
    ST_POLICY,
    bucket_counts,
    link_tick,
    server_tick,
)
from .config import SimConfig, Strategy
from .fairshare import CapacityDemand, allocation_to_constraints, apportion, apportion_int_array, kept_frames
from .mk_policy import ClassConstraintSet, frames_to_remove, plan_degradation
from .replication import (
    CatalogFullError,
    NeighborReport,
    NoAction,
    Redirect,
    Replicate,
    ServerState,
    apply_replication,
    handle_saturation,
)
from .stream_model import PatternLabel, build_gop_template, classify_gop

M, H, O = 0, 1, 2
LABEL_CODE = {PatternLabel.M: M, PatternLabel.H: H, PatternLabel.O: O}

# frame fates
UNRELEASED, QUEUED, POLICY, NET_DROP, RANDOM_LOSS, LATE, RECEIVED = range(7)
LOST_FATES = (POLICY, NET_DROP, RANDOM_LOSS, LATE)

_EPS = 1e-9


class EventKind(enum.IntEnum):
    """Event kinds; the value is the tie-break priority at equal timestamps."""

    SAMPLING_TICK = 0
    FRAME_DELIVERY = 1
    FRAME_RELEASE = 2
    REQUEST_ARRIVAL = 3
    REPLICATION_COMPLETE = 4
    MEASURE_BUCKET_CLOSE = 5


@dataclass(order=True)
class Event:
    time: float
    kind: EventKind
    seq: int
    payload: object = field(default=None, compare=False)


@dataclass(frozen=True)
class MetricsSample:
    bucket_index: int
    sent: int
    received: int
    useful: int
    lost: int
    waiting: int
    served: int
    in_flight: int
    lost_policy: int = 0
    lost_network: int = 0
    lost_random: int = 0
    lost_late: int = 0

    def rate(self, name: str) -> float:
        return getattr(self, name) / self.sent if self.sent else 0.0

    @property
    def received_rate(self) -> float:
        return self.rate("received")

    @property
    def useful_rate(self) -> float:
        return self.rate("useful")

    @property
    def lost_rate(self) -> float:
        return self.rate("lost")

    @property
    def waiting_rate(self) -> float:
        return self.rate("waiting")

    @property
    def served_rate(self) -> float:
        return self.rate("served")


METRICS = ("received", "useful", "lost", "waiting", "served")


def collect_metrics(counters: dict, bucket: int) -> MetricsSample:
    """Build the sample of one bucket from its raw counters."""
    lost_parts = {k: int(counters.get(k, 0)) for k in ("lost_policy", "lost_network", "lost_random", "lost_late")}
    lost = int(counters.get("lost", sum(lost_parts.values())))
    return MetricsSample(
        bucket_index=bucket,
        sent=int(counters.get("sent", 0)),
        received=int(counters.get("received", 0)),
        useful=int(counters.get("useful", 0)),
        lost=lost,
        waiting=int(counters.get("waiting", 0)),
        served=int(counters.get("served", 0)),
        in_flight=int(counters.get("in_flight", 0)),
        **lost_parts,
    )


def draw_arrivals(lam: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrival times on ``[0, horizon)``."""
    if lam < 0:
        raise ValueError("arrival rate must be >= 0")
    if lam == 0 or horizon <= 0:
        return np.empty(0)
    chunks, t = [], 0.0
    while True:
        n = int(lam * horizon + 5 * math.sqrt(lam * horizon) + 10)
        times = t + np.cumsum(rng.exponential(1.0 / lam, n))
        chunks.append(times)
        t = times[-1]
        if t >= horizon:
            break
    out = np.concatenate(chunks)
    return out[out < horizon]


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class LinkStep:
    """Outcome of one tick on the shared link, aligned with the input frames."""

    depart: np.ndarray
    departed: np.ndarray
    overflow: np.ndarray
    random_loss: np.ndarray
    free_after: float


def _fifo_departures(arrive: np.ndarray, rate: float, free: float) -> np.ndarray:
    n = len(arrive)
    return dispatch_times(np.zeros(n, dtype=np.int64), arrive, np.full(n, float(rate)), np.full(n, free))


def network_step(
    arrive: np.ndarray,
    labels: np.ndarray,
    rate: float,
    t_end: float,
    free: float,
    buffer_frames: int,
    p_loss: float,
    strategy: Strategy,
    rng: np.random.Generator,
) -> LinkStep:
    """Push the frames offered to the shared link through one tick.

    ``arrive`` must be non-decreasing (buffered frames first). The link sends
    FIFO at ``rate`` from ``free`` on; whatever cannot leave by ``t_end`` is
    buffered, and beyond ``buffer_frames`` the excess overflows. Overflow
    victims are drawn among all offered frames: uniformly for the baseline,
    O first, then H, then M otherwise (newest first within a label).
    Departed frames are lost independently with probability ``p_loss``.
    """
    n = len(arrive)
    u = rng.random(2 * n)
    depart = _fifo_departures(arrive, rate, free)
    excess = int(np.count_nonzero(depart > t_end + _EPS)) - max(int(buffer_frames), 0)
    overflow = np.zeros(n, dtype=bool)
    if excess > 0:
        if strategy is Strategy.BASELINE:
            victims = np.argsort(u[:n], kind="mergesort")[:excess]
        else:
            victims = np.lexsort((-np.arange(n), -labels.astype(np.int64)))[:excess]
        overflow[victims] = True
        depart = np.full(n, np.inf)
        depart[~overflow] = _fifo_departures(arrive[~overflow], rate, free)
    departed = depart <= t_end + _EPS
    random_loss = departed & (u[n:] < p_loss) if p_loss > 0 else np.zeros(n, dtype=bool)
    free_after = float(depart[departed].max()) if departed.any() else free
    return LinkStep(depart, departed, overflow, random_loss, max(free, free_after))


def _group_starts(groups: np.ndarray) -> np.ndarray:
    change = np.empty(len(groups), dtype=bool)
    change[0] = True
    np.not_equal(groups[1:], groups[:-1], out=change[1:])
    return change


def _group_rank(groups: np.ndarray) -> np.ndarray:
    """0-based position of each element within its run of equal (sorted) group ids."""
    n = len(groups)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    change = _group_starts(groups)
    pos = np.arange(n)
    return pos - np.maximum.accumulate(np.where(change, pos, 0))


def dispatch_times(groups, release, rate, free) -> np.ndarray:
    """Completion times of frames served in the given order by per-group servers.

    ``groups`` must be sorted; ``rate`` and ``free`` (earliest start) are per
    element. Implements ``d_j = max(release_j, d_{j-1}, free) + 1/rate``
    without a Python loop.
    """
    n = len(groups)
    if n == 0:
        return np.empty(0)
    change = _group_starts(groups)
    pos = np.arange(n)
    rank = pos - np.maximum.accumulate(np.where(change, pos, 0))
    v = release - rank / rate
    if change[1:].any():
        span = float(np.abs(v).max()) + float(free.max()) + 1.0
        offset = np.cumsum(change) * (4 * span)
        cm = np.maximum.accumulate(v + offset) - offset
    else:
        cm = np.maximum.accumulate(v)
    return (rank + 1) / rate + np.maximum(cm, free)


@dataclass
class Request:
    index: int
    time: float
    video: int
    rate: float
    deadline: float = math.inf
    reserved_on: int | None = None


@dataclass
class DispatchOutcome:
    """``action`` is one of serve, replicate, wait, reject."""

    action: str
    server: int | None = None
    source: int | None = None


def dispatch_request(
    video: int,
    rate: float,
    servers: list[ServerState],
    now: float,
    allow_replication: bool,
    neighbors: int = 4,
    holders: list[int] | None = None,
) -> DispatchOutcome:
    """Pick the server for a new stream.

    The able holder with the best expected QoS serves it. When every holder
    is saturated and replication is enabled, the best holder interrogates its
    ring neighbors. Otherwise the request waits. ``holders`` optionally lists
    the ids of every server storing (or receiving) the video.
    """
    owners = [s for s in servers if s.has_video(video)] if holders is None else [servers[j] for j in holders]
    if not owners:
        return DispatchOutcome("reject")
    holders = [s for s in owners if s.can_serve(video, now)]
    able = [s for s in holders if not s.saturated(rate)]
    if able:
        best = min(able, key=lambda s: (-s.expected_qos(), s.server_id))
        return DispatchOutcome("serve", best.server_id)
    if allow_replication:
        vs = min(holders or owners, key=lambda s: (-s.expected_qos(), s.server_id))
        n = len(servers)
        ring = []
        for d in range(1, neighbors + 1):
            for j in ((vs.server_id + d) % n, (vs.server_id - d) % n):
                if j != vs.server_id and j not in ring:
                    ring.append(j)
        candidates = {j: servers[j] for j in ring}
        while candidates:
            reports = [NeighborReport(j, s.has_video(video), s.saturated(rate)) for j, s in candidates.items()]
            scores = {j: s.expected_qos() for j, s in candidates.items()}
            decision = handle_saturation(reports, scores)
            if isinstance(decision, Redirect):
                return DispatchOutcome("serve" if servers[decision.target].can_serve(video, now) else "wait",
                                       decision.target)
            if isinstance(decision, Replicate):
                target = servers[decision.target]
                if target.stored >= target.capacity_c:
                    del candidates[decision.target]
                    continue
                return DispatchOutcome("replicate", decision.target, source=vs.server_id)
            break
    return DispatchOutcome("wait")


class FeedbackController:
    """Maps fair-share grants to per-stream kept-frame levels with hysteresis.

    A stream's quality is the number ``T`` of frames per GoP it keeps. Drops
    to a lower target apply immediately; after ``restore_periods`` quiet
    periods in a row, quality climbs one class at a time (P frames, then B).
    """

    def __init__(self, template, restore_periods: int = 2, p_floor: int = 1, b_floor: int = 0):
        self.template = template
        self.pattern = classify_gop(template)
        self.gop_len = L = len(template)
        self.full = ClassConstraintSet.full(1, template.nb_p, L - 1 - template.nb_p)
        self.restore_periods = restore_periods
        self.ladder: list[ClassConstraintSet | None] = [None]
        self.kept = np.zeros(L + 1, dtype=np.int64)
        self.drop_mask = np.zeros((L + 1, L), dtype=bool)
        self.drop_mask[0, :] = True
        for T in range(1, L + 1):
            cs = allocation_to_constraints(self.full, T, L, p_floor=p_floor, b_floor=b_floor)
            self.ladder.append(cs)
            self.kept[T] = cs.total_m
            for pos in plan_degradation(self.pattern, frames_to_remove(cs)):
                self.drop_mask[T, pos] = True
        self.p_boundary = int(self.kept[1 + template.nb_p]) if L > 1 + template.nb_p else L

    def constraints(self, level: int) -> ClassConstraintSet:
        return self.ladder[level]

    def grants(self, demands: dict, net_capacity: float) -> dict:
        items = [CapacityDemand(s, d) for s, d in sorted(demands.items()) if d > 0]
        if not items:
            return {}
        return {a.server_id: a.granted_capacity for a in apportion(net_capacity, items)}

    def targets(self, share: np.ndarray, rate: np.ndarray) -> np.ndarray:
        ratio = np.where(rate > 0, share / rate, 1.0)
        return np.minimum(self.gop_len, np.floor(self.gop_len * ratio + _EPS)).astype(np.int64)

    def step(self, level: np.ndarray, target: np.ndarray, quiet: np.ndarray, miss: np.ndarray):
        """One control period; returns the new ``(level, quiet)`` arrays."""
        level = level.copy()
        quiet = quiet.copy()
        down = target < level
        level[down] = target[down]
        quiet[down] = 0
        up = ~down
        quiet[up & miss] = 0
        quiet[up & ~miss] += 1
        climb = up & (quiet >= self.restore_periods) & (level < target)
        nxt = np.where(level < self.p_boundary, np.minimum(target, self.p_boundary), target)
        level[climb] = nxt[climb]
        quiet[climb] = 0
        return level, quiet


def feedback_tick(
    controller: FeedbackController,
    sessions: list[tuple[int, float]],
    levels: np.ndarray,
    quiet: np.ndarray,
    net_capacity: float,
    beta: float,
    miss: np.ndarray | None = None,
):
    """One controller period over ``sessions`` given as ``(server, required_rate)``.

    Returns ``(grants_by_server, new_levels, new_quiet, constraint_sets)``.
    """
    rates = np.array([r for _, r in sessions], dtype=float)
    committed: dict = {}
    for s, r in sessions:
        committed[s] = committed.get(s, 0.0) + r
    demands = {s: min(beta, c) for s, c in committed.items()}
    grants = controller.grants(demands, net_capacity)
    share = np.array([grants[s] * r / committed[s] for s, r in sessions])
    target = controller.targets(share, rates)
    if miss is None:
        miss = np.zeros(len(sessions), dtype=bool)
    new_levels, new_quiet = controller.step(np.asarray(levels), target, np.asarray(quiet), miss)
    sets = [controller.constraints(int(t)) if t > 0 else None for t in new_levels]
    return grants, new_levels, new_quiet, sets


@dataclass
class RunResult:
    config: SimConfig
    samples: list[MetricsSample]
    totals: dict
    event_counts: dict
    trace_digest: str
    level_history: list = field(default_factory=list)

    def rates(self, metric: str) -> np.ndarray:
        return np.array([s.rate(metric) for s in self.samples])


class Simulation:
    def __init__(self, config: SimConfig, requests: list[tuple[float, int]] | None = None):
        self.cfg = cfg = config
        self.strategy = cfg.strategy
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.arrival_rng = np.random.default_rng(seeds[0])
        self.net_rng = np.random.default_rng(seeds[1])
        self.template = build_gop_template(cfg.nb_p, cfg.b_per_group)
        self.L = L = len(self.template)
        self.labels = np.array([LABEL_CODE[x] for x in classify_gop(self.template).labels], dtype=np.int8)
        self.is_ref = self.labels != O
        self.refs_before = np.concatenate([[0], np.cumsum(self.is_ref)[:-1]])
        self.nf = cfg.nb_gop * L
        self.slack = cfg.deadline_slack_multiplier / cfg.qos
        self.controller = FeedbackController(self.template, cfg.restore_periods, cfg.p_floor, cfg.b_floor)

        if requests is None:
            times = draw_arrivals(cfg.lam, cfg.t_sim, self.arrival_rng)
            videos = self.arrival_rng.choice(cfg.nb_video, size=len(times), p=zipf_weights(cfg.nb_video, cfg.zipf_s))
            requests = list(zip(times.tolist(), videos.tolist()))
        self.requests = [Request(i, float(t), int(v), cfg.qos) for i, (t, v) in enumerate(requests)]
        n_req = len(self.requests)

        self.servers = [
            ServerState(j, cfg.beta, cfg.capacity_c, tm_service=cfg.tm_service) for j in range(cfg.nb_vs)
        ]
        self.holders: dict[int, list[int]] = {}
        for v in range(cfg.nb_video):
            self.servers[v % cfg.nb_vs].catalog.add(v)
            self.holders[v] = [v % cfg.nb_vs]
        self._dirty = True
        self._epoch = 0
        self._seen = np.full(cfg.nb_vs, -1, dtype=np.int64)
        self._committed = np.zeros(cfg.nb_vs)
        self._backlog = np.zeros(cfg.nb_vs, dtype=np.int64)

        # per-session state, indexed by request
        self.s_server = np.full(n_req, -1, dtype=np.int64)
        self.s_start = np.zeros(n_req)
        self.s_rate = np.full(n_req, cfg.qos)
        self.s_next = np.zeros(n_req, dtype=np.int64)
        self.s_active = np.zeros(n_req, dtype=bool)
        self.s_level = np.full(n_req, L, dtype=np.int64)
        self.s_quiet = np.zeros(n_req, dtype=np.int64)
        self.s_got = np.zeros(n_req, dtype=np.int64)
        self.s_kept = np.zeros(n_req, dtype=np.int64)
        self.o_seen = np.zeros(n_req * cfg.nb_gop, dtype=np.int64)
        self.o_rejected = np.zeros(n_req * cfg.nb_gop, dtype=np.int64)

        n_frames = n_req * self.nf
        self.fate = np.zeros(n_frames, dtype=np.int8)
        self.fate_time = np.full(n_frames, math.inf)
        self.served = np.zeros(n_frames, dtype=bool)
        self.waited = np.zeros(n_frames, dtype=bool)
        self.phantoms: list[tuple[float, float, int]] = []

        self.queue = _empty_queue()
        self.srv_rate = np.full(cfg.nb_vs, float(cfg.beta))
        self.srv_free = np.zeros(cfg.nb_vs)
        self.link = _empty_link()
        self.link_free = np.zeros(1)
        self.kstats = np.zeros(5, dtype=np.int64)

        self.waiting: list[Request] = []
        self.reserved: dict[int, list[Request]] = {}
        self.events: list[Event] = []
        self._seq = itertools.count()
        self.now = 0.0
        self.tick_scheduled = False
        self.bucket_scheduled = False
        self.backlog_at_close: list[tuple[int, int]] = []
        self.event_counts: Counter = Counter()
        self._digest = hashlib.sha256()
        self.stats = Counter()
        self.level_history: list[tuple[float, int, int]] = []

    # -- event plumbing ---------------------------------------------------
    def schedule(self, time: float, kind: EventKind, payload=None) -> None:
        heapq.heappush(self.events, (time, int(kind), next(self._seq), payload))

    def run(self) -> RunResult:
        cfg = self.cfg
        for req in self.requests:
            self.schedule(req.time, EventKind.REQUEST_ARRIVAL, req)
        handlers = [None] * len(EventKind)
        for kind, fn in ((EventKind.SAMPLING_TICK, self._on_sampling), (EventKind.FRAME_DELIVERY, self._on_delivery),
                         (EventKind.FRAME_RELEASE, self._on_release), (EventKind.REQUEST_ARRIVAL, self._on_request),
                         (EventKind.REPLICATION_COMPLETE, self._on_replication),
                         (EventKind.MEASURE_BUCKET_CLOSE, self._on_bucket_close)):
            handlers[kind] = fn
        counts = [0] * len(EventKind)
        horizon = cfg.t_sim + _EPS
        events = self.events
        while events and events[0][0] <= horizon:
            time, kind, _, payload = heapq.heappop(events)
            self.now = time
            counts[kind] += 1
            self._digest.update(f"{time!r}:{kind};".encode())
            handlers[kind](payload)
        for kind in EventKind:
            if counts[kind]:
                self.event_counts[kind.name] += counts[kind]
        return self._finish()

    def _ensure_ticking(self) -> None:
        if self.tick_scheduled:
            return
        dt = self.cfg.tick
        nxt = (math.floor(self.now / dt + _EPS) + 1) * dt
        if nxt > self.cfg.t_sim:
            nxt = self.cfg.t_sim
        if nxt <= self.now:
            return
        self.tick_scheduled = True
        self.schedule(nxt, EventKind.FRAME_RELEASE, nxt - dt)
        if not self.bucket_scheduled:
            self._schedule_bucket_close()
        if self.strategy.feedback:
            period = self.cfg.sampling_period
            self.schedule((math.floor(self.now / period + _EPS) + 1) * period, EventKind.SAMPLING_TICK)

    def _busy(self) -> bool:
        return bool(self.s_active.any() or len(self.queue["gid"]) or len(self.link["gid"])
                    or self.waiting or self.reserved)

    # -- requests and replication -----------------------------------------
    def _sync_servers(self) -> None:
        """Recompute per-server load; server objects pick it up lazily in ``_touch``."""
        if not self._dirty:
            return
        self._dirty = False
        act = self.s_active
        self._committed = np.bincount(self.s_server[act], weights=self.s_rate[act], minlength=self.cfg.nb_vs)
        self._backlog = np.bincount(self.queue["srv"], minlength=self.cfg.nb_vs)
        for target, reqs in self.reserved.items():
            self._committed[target] += sum(r.rate for r in reqs)
        self._epoch += 1

    def _touch(self, ids) -> None:
        for j in ids:
            if self._seen[j] != self._epoch:
                s = self.servers[j]
                s.committed_rate = float(self._committed[j])
                s.backlog = int(self._backlog[j])
                self._seen[j] = self._epoch

    def _add_load(self, server: int, rate: float) -> None:
        self._committed[server] += rate
        self._seen[server] = -1

    def _on_request(self, req: Request) -> None:
        req.deadline = req.time + self.cfg.tm_service
        if req.video not in self.holders:
            self.stats["unknown_requests"] += 1
            return
        self._sync_servers()
        self._try_dispatch(req, first=True)
        self._ensure_ticking()

    def _try_dispatch(self, req: Request, first: bool) -> bool:
        holders = self.holders.get(req.video, ())
        if self.strategy.replication:
            n, k = self.cfg.nb_vs, self.cfg.neighbors
            self._touch({(h + d) % n for h in holders for d in range(-k, k + 1)})
        else:
            self._touch(holders)
        out = dispatch_request(req.video, req.rate, self.servers, self.now,
                               self.strategy.replication, self.cfg.neighbors, self.holders.get(req.video))
        if out.action == "serve":
            self._admit(req, out.server)
            return True
        if out.action == "replicate":
            target = self.servers[out.server]
            try:
                delay = apply_replication(self.servers[out.source], target, req.video, self.nf, now=self.now)
            except CatalogFullError:
                delay = None
            if delay is not None:
                self.holders[req.video].append(out.server)
                self.stats["replications"] += 1
                self.schedule(self.now + delay, EventKind.REPLICATION_COMPLETE, (out.server, req.video))
                self._reserve(req, out.server)
                return True
        if out.action == "wait" and out.server is not None:
            self._reserve(req, out.server)
            return True
        if out.action == "reject":
            self.stats["unknown_requests"] += 1
            return True
        if first:
            self.waiting.append(req)
        return False

    def _reserve(self, req: Request, server: int) -> None:
        req.reserved_on = server
        self.reserved.setdefault(server, []).append(req)
        self._add_load(server, req.rate)

    def _on_replication(self, payload) -> None:
        server, video = payload
        self.servers[server].complete_replication(video)
        ready = [r for r in self.reserved.get(server, []) if r.video == video]
        rest = [r for r in self.reserved.get(server, []) if r.video != video]
        if rest:
            self.reserved[server] = rest
        else:
            self.reserved.pop(server, None)
        for r in ready:
            self._admit(r, server)
        self._dirty = True
        self._ensure_ticking()

    def _retry_waiting(self) -> None:
        if not self.waiting:
            return
        self._sync_servers()
        still = []
        for req in self.waiting:
            if self._try_dispatch(req, first=False):
                continue
            if self.now >= req.deadline - _EPS:
                self._reject(req)
            else:
                still.append(req)
        self.waiting = still

    def _reject(self, req: Request) -> None:
        self.stats["rejected_requests"] += 1
        self.phantoms.append((req.time, req.rate, self.nf))

    def _admit(self, req: Request, server: int) -> None:
        i = req.index
        self.s_server[i] = server
        self.s_start[i] = self.now
        self.s_rate[i] = req.rate
        self.s_active[i] = True
        self.s_level[i] = self.L
        self._add_load(server, req.rate)
        self.stats["admitted"] += 1

    def _refuse_session(self, i: int) -> None:
        """Admission refusal of an active stream: its unreleased frames are lost."""
        self.s_active[i] = False
        start = self.s_start[i] + self.s_next[i] / self.s_rate[i]
        self.phantoms.append((start, self.s_rate[i], self.nf - int(self.s_next[i])))
        self._dirty = True
        self.stats["refused_sessions"] += 1

    # -- frames ------------------------------------------------------------
    def _on_release(self, t0: float) -> None:
        cfg = self.cfg
        t1 = self.now
        self.tick_scheduled = False
        self._retry_waiting()
        self._server_step(t0, t1)
        self._link_step(t1)
        if t1 < cfg.t_sim - _EPS and self._busy():
            self.tick_scheduled = True
            self.schedule(min(t1 + cfg.tick, cfg.t_sim), EventKind.FRAME_RELEASE, t1)
        self.schedule(t1 + cfg.net_latency, EventKind.FRAME_DELIVERY, t1)

    def _server_step(self, t0: float, t1: float) -> None:
        act = np.flatnonzero(self.s_active)
        if len(act) == 0 and len(self.queue["gid"]) == 0:
            return
        q = self.queue
        out = server_tick(
            t0, t1, act, self.s_start, self.s_rate, self.s_next, self.s_server, self.s_level, self.s_kept,
            self.nf, self.L, self.cfg.nb_gop, self.labels, self.controller.drop_mask,
            self.strategy.kframes, self.strategy.feedback, self.cfg.deadline_slack_multiplier,
            self.o_seen, self.o_rejected, self.srv_rate, self.srv_free,
            *(q[k] for k in QUEUE_KEYS),
            self.fate, self.fate_time, self.served, self.waited, self.kstats,
        )
        self.s_active[act[self.s_next[act] >= self.nf]] = False
        self._dirty = True
        self.queue = dict(zip(QUEUE_KEYS, out[:7]))
        sent = out[7:]
        if len(sent[0]):
            self.link = {k: np.concatenate([self.link[k], v]) for k, v in zip(LINK_KEYS, sent)}

    def _link_step(self, t1: float) -> None:
        cfg = self.cfg
        q = self.link
        n = len(q["gid"])
        if n == 0:
            return
        uniforms = self.net_rng.random(2 * n)
        keep = link_tick(t1, q["gid"], q["arr"], q["dl"], q["lab"], q["sess"], float(cfg.net_capacity),
                         self.link_free, int(cfg.net_buffer * cfg.net_capacity), self.strategy is Strategy.BASELINE,
                         cfg.p_loss, uniforms, cfg.net_latency, self.fate, self.fate_time, self.s_got, self.kstats)
        if len(keep) < n:
            self.link = {k: v[keep] for k, v in q.items()}

    def _on_delivery(self, payload) -> None:
        pass

    def _schedule_bucket_close(self) -> None:
        width = self.cfg.bucket_width
        b = min(int(self.now / width + _EPS), self.cfg.nb_measure - 1)
        self.bucket_scheduled = True
        self.schedule(min((b + 1) * width, self.cfg.t_sim), EventKind.MEASURE_BUCKET_CLOSE, b)

    def _on_bucket_close(self, bucket: int) -> None:
        self.bucket_scheduled = False
        self.backlog_at_close.append((bucket, len(self.queue["gid"])))
        if self._busy() and self.now < self.cfg.t_sim - _EPS:
            self._schedule_bucket_close()

    # -- feedback ----------------------------------------------------------
    def _grant_array(self, demand_arr: np.ndarray) -> np.ndarray:
        cap = self.cfg.net_capacity
        if float(cap).is_integer() and np.all(demand_arr == np.floor(demand_arr)):
            return apportion_int_array(int(cap), demand_arr.astype(np.int64)).astype(float)
        demands = {int(s): float(demand_arr[s]) for s in np.flatnonzero(demand_arr > 0)}
        grant_arr = np.zeros(len(demand_arr))
        for s, g in self.controller.grants(demands, cap).items():
            grant_arr[s] = g
        return grant_arr

    def _on_sampling(self, _payload) -> None:
        cfg = self.cfg
        if self._busy() and self.now + cfg.sampling_period <= cfg.t_sim + _EPS:
            self.schedule(self.now + cfg.sampling_period, EventKind.SAMPLING_TICK)
        act = np.flatnonzero(self.s_active)
        if len(act) == 0:
            self.srv_rate[:] = cfg.beta
            return
        backlog = np.bincount(self.queue["srv"], minlength=cfg.nb_vs)
        while True:
            srv = self.s_server[act]
            committed = np.bincount(srv, weights=self.s_rate[act], minlength=cfg.nb_vs)
            demand_arr = np.minimum(cfg.beta, committed)
            idle_backlog = (committed == 0) & (backlog > 0)
            demand_arr[idle_backlog] = np.minimum(cfg.beta, backlog[idle_backlog] / cfg.sampling_period)
            grant_arr = self._grant_array(demand_arr)
            share = grant_arr[srv] * self.s_rate[act] / committed[srv]
            target = self.controller.targets(share, self.s_rate[act])
            infeasible = target < 1
            if not infeasible.any():
                break
            # newest stream on each starved server goes first
            bad = act[infeasible]
            newest = bad[np.argmax(self.s_start[bad])]
            self._refuse_session(int(newest))
            act = act[act != newest]
            if len(act) == 0:
                return
        self.srv_rate = np.where(grant_arr > 0, grant_arr, cfg.beta)
        released_kept = self.s_kept[act]
        miss = self.s_got[act] < 0.9 * released_kept
        level, quiet = self.controller.step(self.s_level[act], target, self.s_quiet[act], miss)
        changed = int(np.count_nonzero(level != self.s_level[act]))
        self.s_level[act] = level
        self.s_quiet[act] = quiet
        self.s_got[act] = 0
        self.s_kept[act] = 0
        self.level_history.append((self.now, changed, int(np.count_nonzero(level < self.L))))

    # -- accounting --------------------------------------------------------
    def _audit(self) -> dict:
        """Frame counts straight from per-frame state, to cross-check the bucket counters."""
        t_sim = self.cfg.t_sim
        sess = np.repeat(np.arange(len(self.s_next)), self.s_next)
        idx = np.arange(len(sess)) - np.repeat(np.cumsum(self.s_next) - self.s_next, self.s_next)
        f = sess * self.nf + idx
        inside = self.s_start[sess] + idx / np.maximum(self.s_rate[sess], _EPS) < t_sim
        f = f[inside]
        pending = (self.fate[f] == QUEUED) | (self.fate_time[f] > t_sim + _EPS)
        phantom = sum(int(np.count_nonzero(start + np.arange(n) / rate < t_sim)) for start, rate, n in self.phantoms)
        return {"released_frames": len(f), "phantom_frames": phantom, "pending_frames": int(np.count_nonzero(pending))}

    def _finish(self) -> RunResult:
        cfg = self.cfg
        nb, width = cfg.nb_measure, cfg.bucket_width
        rows = bucket_counts(self.s_start, self.s_rate, self.s_next, self.nf, self.L, self.is_ref, self.fate,
                             self.fate_time, self.served, self.waited, cfg.t_sim, width, nb)
        counters = dict(zip(("sent", "received", "useful", "lost_policy", "lost_network", "lost_random",
                             "lost_late", "waiting", "served"), rows))
        phantom = np.zeros(nb, dtype=np.int64)
        for start, rate, n_left in self.phantoms:
            t = start + np.arange(n_left) / rate
            t = t[t < cfg.t_sim]
            phantom += np.bincount(np.minimum((t / width + _EPS).astype(np.int64), nb - 1), minlength=nb)
        counters["sent"] = counters["sent"] + phantom
        counters["lost_policy"] = counters["lost_policy"] + phantom
        counters["lost"] = sum(counters[k] for k in ("lost_policy", "lost_network", "lost_random", "lost_late"))
        counters["in_flight"] = counters["sent"] - counters["received"] - counters["lost"]
        samples = [collect_metrics({k: v[b] for k, v in counters.items()}, b) for b in range(nb)]

        totals = {k: int(np.sum(v)) for k, v in counters.items()}
        totals.update({k: int(v) for k, v in self.stats.items()})
        for name, slot in (("policy_rejects", ST_POLICY), ("i_policy_drops", ST_I_POLICY),
                           ("i_overflow_drops", ST_I_OVER), ("i_overflow_drops_with_optional", ST_I_OVER_OPT),
                           ("planned_drops", ST_PLANNED)):
            totals[name] = int(self.kstats[slot])
        totals["i_frames_sent"] = int(np.sum((self.s_next + self.L - 1) // self.L))
        totals.update(self._audit())
        return RunResult(cfg, samples, totals, dict(self.event_counts), self._digest.hexdigest(),
                         self.level_history)


QUEUE_KEYS = ("gid", "srv", "rel", "dl", "lab", "gkey", "sess")


LINK_KEYS = ("gid", "arr", "dl", "lab", "sess")


def _empty_link() -> dict:
    return {"gid": np.empty(0, dtype=np.int64), "arr": np.empty(0), "dl": np.empty(0),
            "lab": np.empty(0, dtype=np.int8), "sess": np.empty(0, dtype=np.int64)}


def _empty_queue() -> dict:
    return {
        "gid": np.empty(0, dtype=np.int64), "srv": np.empty(0, dtype=np.int64), "rel": np.empty(0),
        "dl": np.empty(0), "lab": np.empty(0, dtype=np.int8), "gkey": np.empty(0, dtype=np.int64),
        "sess": np.empty(0, dtype=np.int64),
    }


def simulate(config: SimConfig, requests: list[tuple[float, int]] | None = None) -> RunResult:
    return Simulation(config, requests).run()


def run_simulation(config: SimConfig) -> list[MetricsSample]:
    return simulate(config).samples
