"""Simulation configuration: defaults, range checks, key=value text format."""
from __future__ import annotations

import dataclasses
import enum
import math
import os
from dataclasses import dataclass, field, fields


class Strategy(str, enum.Enum):
    BASELINE = "Baseline"
    MK = "Mk"
    MK_KFRAMES = "MkKframes"
    MK_KFRAMES_REPL = "MkKframesRepl"

    @classmethod
    def parse(cls, text: str) -> Strategy:
        for s in cls:
            if s.value.lower() == text.strip().lower():
                return s
        raise ValueError(f"unknown strategy {text!r}; expected one of {[s.value for s in cls]}")

    @property
    def feedback(self) -> bool:
        return self is not Strategy.BASELINE

    @property
    def kframes(self) -> bool:
        return self in (Strategy.MK_KFRAMES, Strategy.MK_KFRAMES_REPL)

    @property
    def replication(self) -> bool:
        return self is Strategy.MK_KFRAMES_REPL


ALL_STRATEGIES = tuple(Strategy)


class ConfigError(ValueError):
    pass


def _rng(lo, hi):
    return {"range": (lo, hi)}


# Accepted ranges; defaults sit at (or just below) their midpoints.
@dataclass(frozen=True)
class SimConfig:
    t_sim: float = field(default=100.0, metadata=_rng(1e-9, math.inf))
    nb_measure: int = field(default=57, metadata=_rng(15, 100))
    nb_video: int = field(default=100, metadata=_rng(5, 200))
    nb_gop: int = field(default=60, metadata=_rng(20, 100))
    nb_p: int = field(default=6, metadata=_rng(3, 9))
    lam: float = field(default=1.05, metadata={**_rng(0.0, 2.0), "key": "lambda"})
    qos: float = field(default=30.0, metadata=_rng(25, 35))
    tm_service: float = field(default=10.5, metadata=_rng(1, 20))
    nb_vs: int = field(default=52, metadata=_rng(5, 100))
    beta: float = field(default=150.0, metadata=_rng(100, 200))
    capacity_c: int = field(default=10, metadata=_rng(1, 20))
    net_capacity: float = field(default=1200.0, metadata=_rng(1e-9, math.inf))
    p_loss: float = field(default=0.02, metadata=_rng(0.0, 1.0))
    strategy: Strategy = Strategy.MK_KFRAMES
    seed: int = field(default=0, metadata=_rng(0, 2**63 - 1))
    deadline_slack_multiplier: float = field(default=5.0, metadata=_rng(1e-9, math.inf))
    sampling_period: float = field(default=2.0, metadata=_rng(1e-9, math.inf))
    # Model knobs without a published value.
    b_per_group: int = field(default=2, metadata=_rng(0, 16))
    net_buffer: float = field(default=0.5, metadata=_rng(0.0, math.inf))
    net_latency: float = field(default=0.5, metadata=_rng(0.0, math.inf))
    tick: float = field(default=1.0, metadata=_rng(1e-3, math.inf))
    zipf_s: float = field(default=1.3, metadata=_rng(0.0, 5.0))
    neighbors: int = field(default=4, metadata=_rng(1, 100))
    restore_periods: int = field(default=2, metadata=_rng(1, 1000))
    p_floor: int = field(default=1, metadata=_rng(0, 9))
    b_floor: int = field(default=0, metadata=_rng(0, 1000))

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            lo_hi = f.metadata.get("range")
            if lo_hi is None:
                continue
            lo, hi = lo_hi
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key_of(f.name)}: expected a number, got {value!r}")
            if f.type == "int" and value != int(value):
                raise ConfigError(f"{key_of(f.name)}: expected an integer, got {value!r}")
            if not lo <= value <= hi:
                raise ConfigError(f"{key_of(f.name)}={value} outside accepted range [{_fmt(lo)},{_fmt(hi)}]")
        if not isinstance(self.strategy, Strategy):
            raise ConfigError(f"strategy: expected a Strategy, got {self.strategy!r}")
        if self.nb_video > self.nb_vs * self.capacity_c:
            raise ConfigError(
                f"nb_video={self.nb_video} does not fit on nb_vs={self.nb_vs} servers of capacity_c={self.capacity_c}"
            )

    @property
    def bucket_width(self) -> float:
        return self.t_sim / self.nb_measure

    def replace(self, **changes) -> SimConfig:
        return dataclasses.replace(self, **changes)


def _fmt(x) -> str:
    if x == math.inf:
        return "inf"
    return f"{x:g}"


def key_of(name: str) -> str:
    f = _FIELDS[name]
    return f.metadata.get("key", name)


_FIELDS = {f.name: f for f in fields(SimConfig)}
KEY_TO_FIELD = {f.metadata.get("key", f.name): f.name for f in fields(SimConfig)}
CONFIG_KEYS = tuple(KEY_TO_FIELD)


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if name == "strategy":
        try:
            return Strategy.parse(raw)
        except ValueError as exc:
            raise ConfigError(f"strategy: {exc}") from None
    try:
        if f.type == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key_of(name)}: cannot parse {raw!r} as {f.type}") from None


def parse_pairs(text: str, source: str = "config") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: dict[str, str], base: SimConfig | None = None) -> SimConfig:
    changes = {}
    for key, raw in pairs.items():
        name = KEY_TO_FIELD.get(key)
        if name is None:
            raise ConfigError(f"unknown key {key!r}; accepted keys: {', '.join(CONFIG_KEYS)}")
        changes[name] = _coerce(name, raw)
    return dataclasses.replace(base or SimConfig(), **changes)


def default_lambda_grid() -> tuple[float, ...]:
    return tuple(round(0.1 * i, 10) for i in range(1, 21))


@dataclass(frozen=True)
class ExperimentPlan:
    """A sweep over arrival rates and strategies, ``n_reps`` replicates per cell."""

    base: SimConfig = field(default_factory=SimConfig)
    lambda_grid: tuple[float, ...] = field(default_factory=default_lambda_grid)
    strategies: tuple[Strategy, ...] = ALL_STRATEGIES
    n_reps: int = 100
    output_path: str = "results"

    def __post_init__(self):
        if not self.lambda_grid:
            raise ConfigError("lambda_grid: must list at least one value")
        for lam in self.lambda_grid:
            if not 0.0 <= lam <= 2.0:
                raise ConfigError(f"lambda_grid: value {lam:g} outside accepted range [0,2]")
        if len(set(self.lambda_grid)) != len(self.lambda_grid):
            raise ConfigError("lambda_grid: values must be distinct")
        if not self.strategies:
            raise ConfigError("strategies: must list at least one strategy")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies: values must be distinct")
        if isinstance(self.n_reps, bool) or not isinstance(self.n_reps, int) or self.n_reps < 1:
            raise ConfigError(f"n_reps={self.n_reps!r} outside accepted range [1,inf)")
        if not self.output_path:
            raise ConfigError("output_path: must not be empty")

    def replace(self, **changes) -> ExperimentPlan:
        return dataclasses.replace(self, **changes)


PLAN_KEYS = ("lambda_grid", "strategies", "n_reps", "output_path")


def _parse_grid(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    try:
        if ":" in raw:
            lo, hi, step = (float(x) for x in raw.split(":"))
            if step <= 0:
                raise ValueError
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return tuple(round(lo + i * step, 10) for i in range(n))
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"lambda_grid: cannot parse {raw!r}; use a,b,c or lo:hi:step") from None


def _plan_from_pairs(plan_pairs: dict[str, str], base: SimConfig) -> ExperimentPlan:
    changes: dict = {"base": base}
    if "lambda_grid" in plan_pairs:
        changes["lambda_grid"] = _parse_grid(plan_pairs["lambda_grid"])
    if "strategies" in plan_pairs:
        try:
            changes["strategies"] = tuple(Strategy.parse(x) for x in plan_pairs["strategies"].split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError(f"strategies: {exc}") from None
    if "n_reps" in plan_pairs:
        raw = plan_pairs["n_reps"].strip()
        try:
            changes["n_reps"] = int(raw)
        except ValueError:
            raise ConfigError(f"n_reps: cannot parse {raw!r} as int") from None
    if "output_path" in plan_pairs:
        changes["output_path"] = plan_pairs["output_path"].strip()
    return ExperimentPlan(**changes)


def parse_config(text: str, env: dict[str, str] | None = None, plan: bool | None = None):
    """Parse a key=value document; ``MKSTREAM_<KEY>`` variables in ``env`` override it.

    Returns an :class:`ExperimentPlan` when the document (or ``plan=True``)
    asks for one, otherwise a :class:`SimConfig`.
    """
    pairs = parse_pairs(text)
    pairs.update(env_overrides(env))
    plan_pairs = {k: pairs.pop(k) for k in PLAN_KEYS if k in pairs}
    config = config_from_pairs(pairs)
    if plan or (plan is None and plan_pairs):
        return _plan_from_pairs(plan_pairs, config)
    if plan_pairs:
        raise ConfigError(f"plan keys {sorted(plan_pairs)} are not valid in a single-run config")
    return config


def env_overrides(env: dict[str, str] | None = None) -> dict[str, str]:
    env = os.environ if env is None else env
    out = {}
    for var, value in env.items():
        if var.startswith("MKSTREAM_"):
            key = var[len("MKSTREAM_"):].lower()
            if key not in KEY_TO_FIELD and key not in PLAN_KEYS:
                raise ConfigError(f"unknown key {key!r} in environment variable {var}")
            out[key] = value
    return out


def _format_value(value) -> str:
    if isinstance(value, Strategy):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config) -> str:
    """Inverse of :func:`parse_config` for both configs and plans."""
    if isinstance(config, ExperimentPlan):
        plan = config
        head = serialize_config(plan.base)
        return head + "".join([
            f"lambda_grid={','.join(repr(x) for x in plan.lambda_grid)}\n",
            f"strategies={','.join(s.value for s in plan.strategies)}\n",
            f"n_reps={plan.n_reps}\n",
            f"output_path={plan.output_path}\n",
        ])
    lines = [f"{f.metadata.get('key', f.name)}={_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"
