"""Saturation handling: neighbor interrogation, target election, video copies."""
from __future__ import annotations

from dataclasses import dataclass, field


class CatalogFullError(RuntimeError):
    """Target server already stores ``capacity_c`` videos."""


@dataclass(frozen=True)
class NeighborReport:
    server_id: object
    has_video: bool
    saturated: bool


@dataclass(frozen=True)
class Redirect:
    target: object


@dataclass(frozen=True)
class Replicate:
    target: object


@dataclass(frozen=True)
class NoAction:
    pass


SaturationDecision = Redirect | Replicate | NoAction


@dataclass
class ServerState:
    """One video server as seen by the master.

    ``pending`` maps a video being copied onto this server to the time the
    copy becomes playable; pending copies count against ``capacity_c``.
    """

    server_id: int
    speed: float
    capacity_c: int
    catalog: set = field(default_factory=set)
    pending: dict = field(default_factory=dict)
    committed_rate: float = 0.0
    backlog: int = 0
    tm_service: float = 10.0

    def __post_init__(self):
        if len(self.catalog) > self.capacity_c:
            raise CatalogFullError(f"server {self.server_id} catalog exceeds capacity {self.capacity_c}")

    @property
    def occupied(self) -> bool:
        return self.backlog > 0

    @property
    def stored(self) -> int:
        return len(self.catalog) + len(self.pending)

    def has_video(self, video_id, include_pending: bool = True) -> bool:
        return video_id in self.catalog or (include_pending and video_id in self.pending)

    def can_serve(self, video_id, now: float) -> bool:
        if video_id in self.catalog:
            return True
        ready = self.pending.get(video_id)
        return ready is not None and ready <= now

    def overloaded(self) -> bool:
        """Backlog beyond what drains within ``tm_service``."""
        return self.backlog > self.speed * self.tm_service

    def saturated(self, extra_rate: float = 0.0) -> bool:
        """Cannot take ``extra_rate`` more at full QoS within the waiting bound."""
        return self.committed_rate + extra_rate > self.speed or self.overloaded()

    def expected_qos(self) -> float:
        """Residual service capacity, normalized by speed."""
        drain = self.committed_rate + self.backlog / max(self.tm_service, 1e-9)
        return (self.speed - drain) / self.speed

    def complete_replication(self, video_id) -> None:
        self.pending.pop(video_id)
        self.catalog.add(video_id)


def _best(candidates: list[NeighborReport], qos_scores: dict):
    missing = [r.server_id for r in candidates if r.server_id not in qos_scores]
    if missing:
        raise KeyError(f"no QoS score for candidate servers {missing}")
    return min(candidates, key=lambda r: (-qos_scores[r.server_id], r.server_id)).server_id


def handle_saturation(reports: list[NeighborReport], qos_scores: dict) -> SaturationDecision:
    """Decide what a saturated holder does with a request it cannot serve.

    An able neighbor that already holds the video takes the request directly.
    Failing that, an able neighbor without the video is elected to receive a
    copy. Best expected QoS wins; ties go to the smallest server id.
    """
    if not reports:
        raise ValueError("no neighbor reports")
    holders = [r for r in reports if r.has_video and not r.saturated]
    if holders:
        return Redirect(_best(holders, qos_scores))
    others = [r for r in reports if not r.has_video and not r.saturated]
    if others:
        return Replicate(_best(others, qos_scores))
    return NoAction()


def replication_delay(video_frames: int, source_speed: float) -> float:
    return video_frames / source_speed


def apply_replication(
    source: ServerState,
    target: ServerState,
    video_id,
    video_frames: int,
    now: float = 0.0,
    delay: float | None = None,
) -> float:
    """Start copying ``video_id`` from ``source`` to ``target``; return the transfer time.

    The target can serve the video once ``now + delay`` is reached and
    :meth:`ServerState.complete_replication` has run.
    """
    if not source.has_video(video_id, include_pending=False):
        raise ValueError(f"source server {source.server_id} does not hold video {video_id!r}")
    if target.has_video(video_id):
        raise ValueError(f"target server {target.server_id} already holds video {video_id!r}")
    if target.stored >= target.capacity_c:
        raise CatalogFullError(f"server {target.server_id} is full ({target.capacity_c} videos)")
    duration = replication_delay(video_frames, source.speed) if delay is None else delay
    target.pending[video_id] = now + duration
    return duration
