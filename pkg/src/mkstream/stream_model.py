"""Synthetic MPEG-like video streams: GoP layout, frame classes and k-frames labels."""
from __future__ import annotations

import enum
from dataclasses import dataclass


class FrameClass(str, enum.Enum):
    """MPEG frame type. Criticality decreases I > P > B."""

    I = "I"
    P = "P"
    B = "B"

    @property
    def criticality(self) -> int:
        return _CRITICALITY[self]


_CRITICALITY = {FrameClass.I: 2, FrameClass.P: 1, FrameClass.B: 0}


class PatternLabel(str, enum.Enum):
    """k-frames alphabet: mandatory, hard optional, optional."""

    M = "M"
    H = "H"
    O = "O"


LABEL_OF_CLASS = {FrameClass.I: PatternLabel.M, FrameClass.P: PatternLabel.H, FrameClass.B: PatternLabel.O}
CLASS_OF_LABEL = {v: k for k, v in LABEL_OF_CLASS.items()}


@dataclass(frozen=True)
class GoPTemplate:
    nb_p: int
    b_per_group: int
    frames: tuple[FrameClass, ...]

    def __post_init__(self):
        if not self.frames or self.frames[0] is not FrameClass.I:
            raise ValueError("a GoP must start with its I frame")
        if self.frames.count(FrameClass.I) != 1:
            raise ValueError("a GoP holds exactly one I frame")
        if self.frames.count(FrameClass.P) != self.nb_p:
            raise ValueError(f"template declares nb_p={self.nb_p} but holds {self.frames.count(FrameClass.P)} P frames")

    @classmethod
    def from_string(cls, text: str) -> GoPTemplate:
        frames = tuple(FrameClass(c) for c in text.strip().upper())
        nb_p = frames.count(FrameClass.P)
        b_run = 0
        for c in frames[1:]:
            if c is FrameClass.B:
                b_run += 1
            else:
                break
        return cls(nb_p=nb_p, b_per_group=b_run, frames=frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __str__(self) -> str:
        return "".join(f.value for f in self.frames)


@dataclass(frozen=True)
class KFramePattern:
    labels: tuple[PatternLabel, ...]

    @classmethod
    def from_string(cls, text: str) -> KFramePattern:
        return cls(tuple(PatternLabel(c) for c in text.strip().upper()))

    def positions(self, label: PatternLabel) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab is label]

    def __len__(self) -> int:
        return len(self.labels)

    def __str__(self) -> str:
        return "".join(lab.value for lab in self.labels)


@dataclass(frozen=True, slots=True)
class Frame:
    stream_id: object
    gop_index: int
    seq_in_gop: int
    frame_class: FrameClass
    label: PatternLabel
    release_time: float
    deadline: float


@dataclass(frozen=True)
class VideoStream:
    video_id: object
    nb_gop: int
    template: GoPTemplate
    pattern: KFramePattern
    required_rate: float

    @property
    def total_frames(self) -> int:
        return self.nb_gop * len(self.template)


def build_gop_template(nb_p: int, b_per_group: int = 2) -> GoPTemplate:
    """Lay out ``I (B^b P)^nb_p B^b``; ``(3, 2)`` gives ``IBBPBBPBBPBB``."""
    if nb_p < 1:
        raise ValueError(f"nb_p must be >= 1, got {nb_p}")
    if b_per_group < 0:
        raise ValueError(f"b_per_group must be >= 0, got {b_per_group}")
    frames = [FrameClass.I]
    for _ in range(nb_p):
        frames.extend([FrameClass.B] * b_per_group)
        frames.append(FrameClass.P)
    frames.extend([FrameClass.B] * b_per_group)
    return GoPTemplate(nb_p=nb_p, b_per_group=b_per_group, frames=tuple(frames))


def classify_gop(template: GoPTemplate) -> KFramePattern:
    return KFramePattern(tuple(LABEL_OF_CLASS[f] for f in template.frames))


def default_slack(required_rate: float, multiplier: float = 5.0) -> float:
    return multiplier / required_rate


def generate_stream(
    video_id,
    nb_gop: int,
    template: GoPTemplate,
    required_rate: float,
    start_time: float = 0.0,
    deadline_slack: float | None = None,
    slack_multiplier: float = 5.0,
) -> list[Frame]:
    """Expand a video into its frame schedule.

    Frames are released every ``1 / required_rate`` time units starting at
    ``start_time``; each frame's deadline is its release time plus
    ``deadline_slack`` (by default ``slack_multiplier`` inter-frame intervals).
    """
    if nb_gop < 1:
        raise ValueError(f"nb_gop must be >= 1, got {nb_gop}")
    if required_rate <= 0:
        raise ValueError("required_rate must be positive")
    slack = default_slack(required_rate, slack_multiplier) if deadline_slack is None else deadline_slack
    if slack <= 0:
        raise ValueError("deadline slack must be positive")
    pattern = classify_gop(template)
    gop_len = len(template)
    frames = []
    for n in range(nb_gop * gop_len):
        gop, pos = divmod(n, gop_len)
        release = start_time + n / required_rate
        frames.append(
            Frame(
                stream_id=video_id,
                gop_index=gop,
                seq_in_gop=pos,
                frame_class=template.frames[pos],
                label=pattern.labels[pos],
                release_time=release,
                deadline=release + slack,
            )
        )
    return frames
