"""Scenario configuration: YAML documents validated into :class:`ScenarioConfig`.

Durations accept integers (nanoseconds) or strings with a unit suffix
(``ns``, ``us``, ``ms``, ``s``). Dotted-path overrides such as
``mac.fixed_mcs=14`` or ``traffic.0.echo=false`` are applied to the raw
document before validation.
"""

from __future__ import annotations

import copy
import re
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Literal, Optional

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import ChannelScenario, LinkState

_UNITS = {"ns": 1, "us": 1_000, "µs": 1_000, "ms": 1_000_000, "s": 1_000_000_000}
_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ns|us|µs|ms|s)\s*$")


def parse_duration(value: Any) -> int:
    """Nanoseconds from an int (ns) or a string like ``"2s"`` / ``"250us"``."""
    if isinstance(value, bool):
        raise ValueError("duration cannot be a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError("bare numeric durations are nanoseconds and must be whole")
        return int(value)
    if isinstance(value, str):
        m = _DURATION_RE.match(value)
        if not m:
            raise ValueError(f"cannot parse duration {value!r}")
        return int(round(float(m.group(1)) * _UNITS[m.group(2)]))
    raise ValueError(f"cannot parse duration {value!r}")


Duration = Annotated[int, BeforeValidator(parse_duration)]


class ConfigError(ValueError):
    """Validation failure; ``errors`` holds (dotted path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlockerSpec(_Section):
    name: str
    height_m: float = Field(gt=0)
    weight: float = Field(default=1.0, gt=0)


class ShadowingSpec(_Section):
    slope_db: float = 15.0
    offset_db: float = -41.0
    sigma_db: float = Field(default=4.5, ge=0)


class ChannelSection(_Section):
    scenario: str = "Highway"
    frequency_ghz: float = Field(default=28.0, ge=0.5, le=100.0)
    forced_state: Optional[str] = None
    fading: Literal["off", "gaussian-db"] = "off"
    fading_sigma_db: float = Field(default=0.0, ge=0)
    update_period: Duration = Field(default=100_000_000, gt=0)
    update_distance_m: float = Field(default=5.0, gt=0)
    simple_interference_gain: bool = False
    extended_urban_negated_exponent: bool = False
    blockers: list[BlockerSpec] = Field(
        default_factory=lambda: [
            BlockerSpec(name="car", height_m=1.6),
            BlockerSpec(name="van", height_m=2.5),
            BlockerSpec(name="truck", height_m=3.0),
        ]
    )
    shadowing: ShadowingSpec = Field(default_factory=ShadowingSpec)

    @field_validator("scenario")
    @classmethod
    def _scenario(cls, v):
        return ChannelScenario.parse(v).value

    @field_validator("forced_state")
    @classmethod
    def _forced(cls, v):
        return None if v is None else LinkState.parse(v).value

    @field_validator("blockers")
    @classmethod
    def _blockers(cls, v):
        if not v:
            raise ValueError("at least one blocker type is required")
        names = [b.name for b in v]
        if len(set(names)) != len(names):
            raise ValueError("blocker names must be unique")
        return v


class PhySection(_Section):
    numerology: int = 2
    bandwidth_hz: float = Field(default=100e6, gt=0)
    tx_power_dbm: float = 30.0
    noise_figure_db: float = Field(default=5.0, ge=0)
    mcs_table: Optional[str] = None
    control_symbols: int = Field(default=2, ge=0, le=13)
    tbs_overhead: float = Field(default=0.0, ge=0, lt=1)
    csi_period: Duration = Field(default=1_000_000, gt=0)

    @field_validator("numerology")
    @classmethod
    def _numerology(cls, v):
        if v not in (2, 3):
            raise ValueError("numerology must be 2 or 3")
        return v


class MacSection(_Section):
    amc: bool = True
    fixed_mcs: Optional[int] = Field(default=None, ge=0, le=28)
    default_mcs: int = Field(default=0, ge=0, le=28)
    target_bler: float = Field(default=0.1, gt=0, lt=1)
    # group name -> {rnti: [slots]}
    slot_patterns: dict[str, dict[int, list[int]]] = Field(default_factory=dict)


class StackSection(_Section):
    rlc_capacity: int = Field(default=500, gt=0)
    rlc_capacity_unit: Literal["packets", "bytes"] = "packets"


class AntennaSpec(_Section):
    elements: int = Field(default=1, ge=1)
    isotropic: bool = True
    boresight_deg: Optional[float] = None
    element_gain_dbi: float = 0.0


class VehicleSpec(_Section):
    rnti: int = Field(ge=0, le=0xFFFF)
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    antenna: AntennaSpec = Field(default_factory=AntennaSpec)
    street: Optional[int] = None


class GroupSpec(_Section):
    name: str
    members: list[int] = Field(min_length=1)


class TrafficSpec(_Section):
    src: int
    dst: int
    packet_size: int = Field(default=1024, ge=16, le=60000)
    interval: Duration = Field(gt=0)
    start: Duration = Field(default=0, ge=0)
    stop: Optional[Duration] = None
    echo: bool = False


class ScenarioConfig(_Section):
    name: str = "scenario"
    seed: int = Field(default=1, ge=0, lt=2**64)
    duration: Duration = Field(default=2_000_000_000, gt=0)
    channel: ChannelSection = Field(default_factory=ChannelSection)
    phy: PhySection = Field(default_factory=PhySection)
    mac: MacSection = Field(default_factory=MacSection)
    stack: StackSection = Field(default_factory=StackSection)
    vehicles: list[VehicleSpec] = Field(min_length=1)
    groups: list[GroupSpec] = Field(default_factory=list)
    traffic: list[TrafficSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _cross_checks(self):
        errs: list[str] = []
        rntis = [v.rnti for v in self.vehicles]
        if len(set(rntis)) != len(rntis):
            errs.append("vehicles: rnti values must be unique")
        known = set(rntis)
        group_of: dict[int, str] = {}
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            errs.append("groups: names must be unique")
        slots = 2**self.phy.numerology
        for gi, g in enumerate(self.groups):
            if len(set(g.members)) != len(g.members):
                errs.append(f"groups.{gi}.members: duplicate member")
            for m in g.members:
                if m not in known:
                    errs.append(f"groups.{gi}.members: unknown rnti {m}")
                elif m in group_of:
                    errs.append(f"groups.{gi}.members: rnti {m} already in group {group_of[m]!r}")
                else:
                    group_of[m] = g.name
            if g.name not in self.mac.slot_patterns and len(g.members) > slots:
                errs.append(
                    f"groups.{gi}: {len(g.members)} members exceed {slots} slots for the default pattern"
                )
        for gname, assign in self.mac.slot_patterns.items():
            group = next((g for g in self.groups if g.name == gname), None)
            if group is None:
                errs.append(f"mac.slot_patterns.{gname}: no such group")
                continue
            seen: dict[int, int] = {}
            for rnti, owned in assign.items():
                if rnti not in group.members:
                    errs.append(f"mac.slot_patterns.{gname}.{rnti}: not a member of the group")
                for s in owned:
                    if not 0 <= s < slots:
                        errs.append(f"mac.slot_patterns.{gname}.{rnti}: slot {s} outside 0..{slots - 1}")
                    elif s in seen:
                        errs.append(
                            f"mac.slot_patterns.{gname}.{rnti}: slot {s} already owned by {seen[s]}"
                        )
                    else:
                        seen[s] = rnti
        for ti, t in enumerate(self.traffic):
            for end in ("src", "dst"):
                r = getattr(t, end)
                if r not in known:
                    errs.append(f"traffic.{ti}.{end}: unknown rnti {r}")
            if t.src == t.dst:
                errs.append(f"traffic.{ti}: src and dst must differ")
            elif t.src in group_of and t.dst in group_of and group_of[t.src] != group_of[t.dst]:
                errs.append(f"traffic.{ti}: src and dst are in different groups")
            elif t.src not in group_of or t.dst not in group_of:
                errs.append(f"traffic.{ti}: src and dst must both belong to a group")
        if errs:
            raise ValueError("\n".join(errs))
        return self

    def effective_mcs_override(self) -> int | None:
        if self.mac.fixed_mcs is not None:
            return self.mac.fixed_mcs
        if not self.mac.amc:
            return self.mac.default_mcs
        return None


# --- loading ----------------------------------------------------------------


def shipped_scenarios() -> list[str]:
    root = resources.files("mmv2v").joinpath("data/scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(ref: str | Path) -> Path:
    """A filesystem path, or the name of a shipped scenario (e.g. ``example-one``)."""
    p = Path(ref)
    if p.exists():
        return p
    name = str(ref)
    if name in shipped_scenarios():
        return Path(str(resources.files("mmv2v").joinpath(f"data/scenarios/{name}.yaml")))
    raise FileNotFoundError(f"no config file or shipped scenario named {ref!r}")


def _coerce_index(node: Any, key: str):
    if isinstance(node, list):
        try:
            return int(key)
        except ValueError:
            raise ConfigError([(key, "list index must be an integer")]) from None
    if isinstance(node, dict):
        for k in node:
            if str(k) == key:
                return k
        try:
            ik = int(key)
        except ValueError:
            return key
        return ik if ik in node else key
    raise ConfigError([(key, "cannot descend into a scalar")])


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``dotted.path=value`` assignment; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError([(assignment, "override must look like path=value")])
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError([(assignment, "empty override path")])
    value = yaml.safe_load(raw)
    node = doc
    for k in keys[:-1]:
        idx = _coerce_index(node, k)
        try:
            child = node[idx]
        except (KeyError, IndexError):
            if isinstance(node, dict):
                child = node[idx] = {}
            else:
                raise ConfigError([(path, f"index {k} out of range")]) from None
        node = child
    last = _coerce_index(node, keys[-1])
    if isinstance(node, list) and not -len(node) <= last < len(node):
        raise ConfigError([(path, f"index {last} out of range")])
    node[last] = value
    return doc


def _format_errors(exc: ValidationError) -> list[tuple[str, str]]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        msg = e["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        for line in msg.splitlines():
            out.append((loc, line))
    return out


def parse_config(document: str | dict, overrides: list[str] | tuple[str, ...] = ()) -> ScenarioConfig:
    """Validate a YAML text (or an already-loaded mapping) into a config."""
    if isinstance(document, str):
        try:
            doc = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ConfigError([("<document>", f"invalid YAML: {exc}")]) from None
    else:
        doc = copy.deepcopy(document)
    if not isinstance(doc, dict):
        raise ConfigError([("<document>", "top level must be a mapping")])
    for o in overrides:
        apply_override(doc, o)
    try:
        return ScenarioConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(ref: str | Path, overrides: list[str] | tuple[str, ...] = ()) -> ScenarioConfig:
    return parse_config(resolve_config_path(ref).read_text(), overrides)


def effective_config_dict(cfg: ScenarioConfig) -> dict:
    return cfg.model_dump(mode="json")


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(effective_config_dict(cfg), sort_keys=False)
