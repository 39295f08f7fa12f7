"""Scenario configuration: INI-style text in, validated dataclasses out.

Every key lives in a section named after the object it configures::

    [run]
    scenario = keyrates
    duration_s = 30
    seed = 20200101

    [detector]
    dark_rate_hz = 100

Keys whose name is unique across sections may also appear before the first
section header.  Unknown keys and out-of-range values are rejected with the
offending line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields

from symdoqkd.coincidence import CoincidenceConfig
from symdoqkd.optics import DetectorParams, PathParams
from symdoqkd.protocol import CONVENTIONS, FrameConfig, SecurityPolicy, SessionConfig
from symdoqkd.source import ChannelPlan, SourceParams, build_default_plan

SCENARIOS = ("channels", "subnet-coincidence", "bases", "keyrates", "network", "custom")
_TOP = "__top__"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class RunSettings:
    scenario: str = "keyrates"
    duration_s: float = 30.0
    seed: int = 20200101
    # channel combo feeding single-subnet scenarios; 5 is (C49, C31)
    combo_id: int = 5
    # user pair of the bases scenario
    pair: tuple = (0, 1)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if len(self.pair) != 2 or self.pair[0] == self.pair[1]:
            raise ValueError("pair must name two distinct users")


@dataclass(frozen=True)
class SessionSettings:
    convention: str = CONVENTIONS[0]
    center_on_peak: bool = True

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")


@dataclass(frozen=True)
class TopologySettings:
    # users per subnet follow path.n_users
    m_subnets: int = 16

    def __post_init__(self):
        if self.m_subnets < 1:
            raise ValueError("m_subnets must be >= 1")


_SECTIONS = {
    "run": RunSettings,
    "source": SourceParams,
    "path": PathParams,
    "detector": DetectorParams,
    "coincidence": CoincidenceConfig,
    "frame": FrameConfig,
    "security": SecurityPolicy,
    "session": SessionSettings,
    "topology": TopologySettings,
}
_ATTR = {
    "run": "run", "source": "source", "path": "path", "detector": "detector",
    "coincidence": "coincidence", "frame": "frames", "security": "policy",
    "session": "session", "topology": "topology",
}


@dataclass(frozen=True)
class ScenarioConfig:
    run: RunSettings = field(default_factory=RunSettings)
    source: SourceParams = field(default_factory=SourceParams)
    path: PathParams = field(default_factory=PathParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    coincidence: CoincidenceConfig = field(default_factory=CoincidenceConfig)
    frames: FrameConfig = field(default_factory=FrameConfig)
    policy: SecurityPolicy = field(default_factory=SecurityPolicy)
    session: SessionSettings = field(default_factory=SessionSettings)
    topology: TopologySettings = field(default_factory=TopologySettings)
    plan: ChannelPlan = field(default_factory=build_default_plan)

    def __post_init__(self):
        self.source.validate(self.plan.grid_spacing_thz)
        self.policy.validate_for(self.frames.bits_per_symbol)
        if not 0 <= self.run.combo_id < len(self.plan):
            raise ValueError(f"combo_id {self.run.combo_id} not in channel plan")
        # only the bases scenario reads the pair, so a one-user splitter stays valid
        if self.run.scenario == "bases" and (max(self.run.pair) >= self.path.n_users or min(self.run.pair) < 0):
            raise ValueError("pair refers to a user beyond n_users")

    @property
    def session_config(self) -> SessionConfig:
        return SessionConfig(self.coincidence, self.frames, self.policy,
                             self.session.convention, self.session.center_on_peak)

    def with_run(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **changes))

    def to_dict(self) -> dict:
        out = {}
        for section, attr in _ATTR.items():
            out[section] = {k: _plain(v) for k, v in dataclasses.asdict(getattr(self, attr)).items()}
        out["plan"] = self.plan.to_section()
        return out

    def to_text(self) -> str:
        """Canonical INI text; parsing it gives back an equal config."""
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _plain(value):
    if isinstance(value, dict):
        return {str(k): v for k, v in sorted(value.items())}
    if isinstance(value, tuple):
        return list(value)
    return value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v!r}" for k, v in value.items())
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dict):
        out = {}
        for item in filter(None, (p.strip() for p in raw.split(","))):
            user, value = item.split(":")
            out[int(user)] = float(value)
        return out
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(","))
    return raw


def _key_lines(text: str) -> dict:
    """Map (section, key) -> 1-based line number."""
    where = {}
    section = _TOP
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            where.setdefault((section, None), n)
            continue
        for sep in ("=", ":"):
            if sep in stripped:
                where[(section, stripped.split(sep, 1)[0].strip().lower())] = n
                break
    return where


def _unique_owner(key: str):
    owners = [s for s, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
    return owners[0] if len(owners) == 1 else None


def parse_config(text: str) -> ScenarioConfig:
    lines = _key_lines(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    try:
        parser.read_string(f"[{_TOP}]\n" + text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"syntax error: {exc.message if hasattr(exc, 'message') else exc}",
                          line - 1 if line else None) from None

    values: dict[str, dict[str, tuple[str, int | None]]] = {s: {} for s in list(_SECTIONS) + ["plan"]}
    for section in parser.sections():
        for key, raw in parser.items(section, raw=True):
            line = lines.get((section, key))
            if section == _TOP:
                owner = _unique_owner(key)
                if owner is None:
                    raise ConfigError(f"key {key!r} must appear inside a section", line)
                target = owner
            elif section in values:
                target = section
            else:
                raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
            values[target][key] = (raw, line)

    built = {}
    for section, cls in _SECTIONS.items():
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, (raw, line) in values[section].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            try:
                kwargs[key] = _convert(raw, getattr(defaults, key), key)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", line) from None
        try:
            built[_ATTR[section]] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            line = min((ln for _, ln in values[section].values() if ln), default=None)
            raise ConfigError(f"[{section}] invariant violated: {exc}", line) from None

    if values["plan"]:
        try:
            built["plan"] = ChannelPlan.from_section({k: raw for k, (raw, _) in values["plan"].items()})
        except (ValueError, KeyError) as exc:
            line = min((ln for _, ln in values["plan"].values() if ln), default=None)
            raise ConfigError(f"[plan] invalid: {exc}", line) from None
    try:
        return ScenarioConfig(**built)
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path) -> ScenarioConfig:
    """Read an INI file, or the ``config_text`` of a bundle's manifest.json."""
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        text = json.loads(text)["config_text"]
    return parse_config(text)
