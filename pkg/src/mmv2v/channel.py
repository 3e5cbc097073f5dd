"""Vehicular mmWave channel: link-state probabilities, pathloss, NLOSv
blocker shadowing, antenna array gain and link budget.

Distances are in metres, carrier frequencies in GHz and powers in dB/dBm.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .kernel import NS_PER_S, RandomStream, StreamFactory

log = logging.getLogger(__name__)

D_MIN_M = 1.0
THERMAL_NOISE_DBM_HZ = -174.0


class ChannelScenario(enum.Enum):
    HIGHWAY = "Highway"
    URBAN = "Urban"
    EXTENDED_HIGHWAY = "ExtendedHighway"
    EXTENDED_URBAN = "ExtendedUrban"

    @property
    def is_highway(self) -> bool:
        return self in (ChannelScenario.HIGHWAY, ChannelScenario.EXTENDED_HIGHWAY)

    @classmethod
    def parse(cls, name: str | "ChannelScenario") -> "ChannelScenario":
        if isinstance(name, cls):
            return name
        key = str(name).replace("V2V-", "").replace("-", "").replace("_", "").lower()
        for s in cls:
            if s.value.lower() == key:
                return s
        raise ValueError(f"unknown channel scenario {name!r}")


class LinkState(enum.Enum):
    LOS = "LOS"
    NLOSV = "NLOSv"
    NLOS = "NLOS"

    @classmethod
    def parse(cls, name: str | "LinkState") -> "LinkState":
        if isinstance(name, cls):
            return name
        for s in cls:
            if s.value.lower() == str(name).lower():
                return s
        raise ValueError(f"unknown link state {name!r}")


@dataclass(frozen=True)
class StateProbabilities:
    p_los: float
    p_nlosv: float
    p_nlos: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_los, self.p_nlosv, self.p_nlos)


# Highway LOS quadratic for d <= 475 m
HW_A = 2.1013e-6
HW_B = -0.002
HW_C = 1.0193


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _ext_urban_nlosv(d: float, negated_exponent: bool) -> float:
    if d <= 0.0:
        return 0.0 if negated_exponent else 1.0
    expo = (-(math.log(d) - 5.0063)) ** 2 / 2.4544
    if negated_exponent:
        expo = -expo
    log_p = expo - math.log(0.0312) - math.log(d)
    if log_p >= 0.0:
        return 1.0
    return math.exp(log_p)


def state_probabilities(
    scenario: ChannelScenario | str,
    d: float,
    *,
    different_streets: bool = False,
    negated_exponent: bool = False,
) -> StateProbabilities:
    """LOS / NLOSv / NLOS probabilities at distance ``d``.

    The first-evaluated term is kept exactly; the second is capped at the
    remaining mass and the third takes the residual, so the triple is always
    a valid distribution.
    """
    scenario = ChannelScenario.parse(scenario)
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    if different_streets:
        return StateProbabilities(0.0, 0.0, 1.0)

    if scenario is ChannelScenario.HIGHWAY:
        if d <= 475.0:
            p_los = min(1.0, HW_A * d * d + HW_B * d + HW_C)
        else:
            p_los = max(0.0, 0.54 - 0.001 * (d - 475.0))
        p_los = _clip01(p_los)
        return StateProbabilities(p_los, 1.0 - p_los, 0.0)

    if scenario is ChannelScenario.URBAN:
        p_los = min(1.0, 1.05 * math.exp(-0.0114 * d))
        return StateProbabilities(p_los, 1.0 - p_los, 0.0)

    if scenario is ChannelScenario.EXTENDED_HIGHWAY:
        p_los = _clip01(2.7e-6 * d * d - 0.0025 * d + 1.0)
        p_nlos = _clip01(-3.7e-7 * d * d + 0.00061 * d + 0.015)
        rest = 1.0 - p_los
        p_nlos = min(p_nlos, rest)
        return StateProbabilities(p_los, rest - p_nlos, p_nlos)

    # extended urban: NLOSv is the second evaluated term, NLOS the residual
    p_los = _clip01(0.8372 * math.exp(-0.0114 * d))
    p_nlosv = _clip01(_ext_urban_nlosv(d, negated_exponent))
    rest = 1.0 - p_los
    p_nlosv = min(p_nlosv, rest)
    return StateProbabilities(p_los, p_nlosv, rest - p_nlosv)


def sample_state(
    probs: StateProbabilities,
    stream: RandomStream,
    forced: LinkState | None = None,
) -> LinkState:
    """Draw one state: u in [0, p_los) -> LOS, [p_los, p_los + p_nlosv) -> NLOSv, else NLOS."""
    if forced is not None:
        return forced
    u = stream.uniform()
    if u < probs.p_los:
        return LinkState.LOS
    if u < probs.p_los + probs.p_nlosv:
        return LinkState.NLOSV
    return LinkState.NLOS


def los_pathloss_db(scenario: ChannelScenario, d: float, fc_ghz: float) -> float:
    if scenario.is_highway:
        return 32.4 + 20.0 * math.log10(d) + 20.0 * math.log10(fc_ghz)
    return 38.77 + 16.7 * math.log10(d) + 18.2 * math.log10(fc_ghz)


def nlos_pathloss_db(d: float, fc_ghz: float) -> float:
    return 36.85 + 30.0 * math.log10(d) + 18.9 * math.log10(fc_ghz)


def pathloss_db(
    scenario: ChannelScenario | str,
    state: LinkState | str,
    d: float,
    fc_ghz: float,
    shadow_db: float = 0.0,
    stats: dict | None = None,
) -> float:
    """Deterministic pathloss for one link; NLOSv adds ``shadow_db`` on top of LOS."""
    scenario = ChannelScenario.parse(scenario)
    state = LinkState.parse(state)
    if d < D_MIN_M:
        if stats is not None:
            stats["pathloss_distance_clamped"] = stats.get("pathloss_distance_clamped", 0) + 1
        d = D_MIN_M
    if state is LinkState.NLOS:
        return nlos_pathloss_db(d, fc_ghz)
    pl = los_pathloss_db(scenario, d, fc_ghz)
    if state is LinkState.NLOSV:
        pl += shadow_db
    return pl


# --- NLOSv blockers -------------------------------------------------------


@dataclass(frozen=True)
class BlockerType:
    name: str
    height_m: float
    weight: float = 1.0


DEFAULT_BLOCKERS: tuple[BlockerType, ...] = (
    BlockerType("car", 1.6),
    BlockerType("van", 2.5),
    BlockerType("truck", 3.0),
)


@dataclass(frozen=True)
class ShadowingProfile:
    """Blocker loss for a blocker taller than both antennas: N(max(0, slope*log10 d + offset), sigma)."""

    slope_db: float = 15.0
    offset_db: float = -41.0
    sigma_db: float = 4.5

    def mean_db(self, d: float) -> float:
        return max(0.0, self.slope_db * math.log10(max(d, D_MIN_M)) + self.offset_db)


def nlosv_shadowing_draw(
    d: float,
    blocker_type: str | BlockerType,
    stream: RandomStream,
    blockers: Sequence[BlockerType] = DEFAULT_BLOCKERS,
    antenna_heights: tuple[float, float] = (1.6, 1.6),
    profile: ShadowingProfile = ShadowingProfile(),
) -> float:
    """Additional NLOSv loss in dB (Gaussian in dB, i.e. log-normal in linear)."""
    name = blocker_type.name if isinstance(blocker_type, BlockerType) else blocker_type
    by_name = {b.name: b for b in blockers}
    if name not in by_name:
        raise ValueError(f"unknown blocker type {name!r}; known: {sorted(by_name)}")
    blocker = by_name[name]
    if blocker.height_m > max(antenna_heights):
        return stream.normal(profile.mean_db(d), profile.sigma_db)
    return 0.0


# --- antenna arrays -------------------------------------------------------


def element_gain_db(offset_rad: float, element_gain_dbi: float = 0.0) -> float:
    """Horizontal cut of the 3GPP directional element: 65 deg beamwidth, 30 dB floor."""
    phi = math.degrees(math.remainder(offset_rad, 2.0 * math.pi))
    return element_gain_dbi - min(12.0 * (phi / 65.0) ** 2, 30.0)


def steering_vector(n: int, angle_rad: float) -> np.ndarray:
    """Half-wavelength ULA response toward ``angle_rad`` (measured from broadside)."""
    return np.exp(1j * math.pi * np.arange(n) * math.sin(angle_rad))


def dft_codebook(n: int) -> np.ndarray:
    """Columns are the ``n`` orthogonal DFT beams of an ``n``-element ULA."""
    k = np.arange(n)
    return np.exp(-2j * math.pi * np.outer(k, k) / n) / math.sqrt(n)


@dataclass(frozen=True)
class AntennaArray:
    n_elements: int = 1
    isotropic: bool = True
    # None: the array broadside follows the pointing direction
    boresight_deg: float | None = None
    element_gain_dbi: float = 0.0

    def __post_init__(self):
        if self.n_elements < 1:
            raise ValueError("antenna array needs at least one element")

    def _element_db(self, angle_rad: float) -> float:
        if self.isotropic:
            return 0.0
        return element_gain_db(angle_rad, self.element_gain_dbi)

    def gain_db(self, aim_rad: float, toward_rad: float) -> float:
        """Gain toward azimuth ``toward_rad`` with the beam steered at ``aim_rad``."""
        broadside = aim_rad if self.boresight_deg is None else math.radians(self.boresight_deg)
        theta0 = aim_rad - broadside
        theta = toward_rad - broadside
        n = self.n_elements
        if n == 1:
            af = 1.0
        else:
            w = steering_vector(n, theta0) / math.sqrt(n)
            af = float(abs(np.vdot(w, steering_vector(n, theta))) ** 2)
        if af <= 1e-30:
            return -300.0
        return 10.0 * math.log10(af) + self._element_db(theta)


def beamforming_gain_db(tx: AntennaArray, rx: AntennaArray) -> float:
    """Combined gain of a perfectly aligned link."""
    return tx.gain_db(0.0, 0.0) + rx.gain_db(0.0, 0.0)


# --- link budget ----------------------------------------------------------


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float = 30.0
    noise_figure_db: float = 5.0
    bandwidth_hz: float = 100e6
    carrier_frequency_ghz: float = 28.0

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.5 <= self.carrier_frequency_ghz <= 100.0:
            raise ValueError("carrier frequency outside [0.5, 100] GHz")

    @property
    def noise_floor_dbm(self) -> float:
        return noise_floor_dbm(self.bandwidth_hz, self.noise_figure_db)


def noise_floor_dbm(bandwidth_hz: float, noise_figure_db: float) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(bandwidth_hz) + noise_figure_db


def received_power_dbm(budget: LinkBudget, pathloss: float, bf_gain_db: float) -> float:
    return budget.tx_power_dbm - pathloss + bf_gain_db


def db_to_lin(x: float) -> float:
    return 10.0 ** (x / 10.0)


def lin_to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


# --- per-link channel state -----------------------------------------------


@dataclass
class ChannelState:
    link: tuple[int, int]
    state: LinkState
    nlosv_shadowing_db: float = 0.0
    fading_db: float = 0.0
    blocker: str | None = None
    last_update: int = 0
    distance_at_update: float = 0.0
    next_update: int = 0
    updates: int = 0


@dataclass(frozen=True)
class Mover:
    """Constant-velocity node as the channel sees it."""

    position: tuple[float, float, float]
    velocity: tuple[float, float, float]
    street: int | None = None

    def at(self, t_ns: int) -> np.ndarray:
        t = t_ns / NS_PER_S
        return np.asarray(self.position, dtype=float) + np.asarray(self.velocity, dtype=float) * t


@dataclass
class ChannelConfig:
    scenario: ChannelScenario = ChannelScenario.HIGHWAY
    frequency_ghz: float = 28.0
    forced_state: LinkState | None = None
    fading_mode: str = "off"
    fading_sigma_db: float = 0.0
    update_period_ns: int = 100_000_000
    update_distance_m: float = 5.0
    negated_exponent: bool = False
    blockers: tuple[BlockerType, ...] = DEFAULT_BLOCKERS
    shadowing: ShadowingProfile = field(default_factory=ShadowingProfile)


def _first_crossing_after(dp: np.ndarray, dv: np.ndarray, t0: float, target: float) -> float | None:
    """Smallest t > t0 with |dp + dv t| == target (times in seconds)."""
    a = float(dv @ dv)
    if a == 0.0 or target < 0.0:
        return None
    b = 2.0 * float(dp @ dv)
    c = float(dp @ dp) - target * target
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    for root in sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a))):
        if root > t0 + 1e-12:
            return root
    return None


class ChannelModel:
    """Owns the per-link :class:`ChannelState` and applies the update policy.

    A link's state is re-drawn every ``update_period_ns`` and whenever the
    distance has drifted by more than ``update_distance_m`` since the last
    draw. Update instants follow from the trajectories alone, so the draws a
    link sees do not depend on when (or how often) it is queried.
    """

    def __init__(
        self,
        config: ChannelConfig,
        movers: Mapping[int, Mover],
        streams: StreamFactory,
        antenna_heights: Mapping[int, float] | None = None,
    ):
        self.config = config
        self.movers = dict(movers)
        self.streams = streams
        self.antenna_heights = dict(antenna_heights or {})
        self.links: dict[tuple[int, int], ChannelState] = {}
        self.stats: dict[str, int] = {}
        self.on_update: Callable[[ChannelState], None] | None = None

    def distance(self, a: int, b: int, t_ns: int) -> float:
        return float(np.linalg.norm(self.movers[a].at(t_ns) - self.movers[b].at(t_ns)))

    def _next_update(self, link: tuple[int, int], t_ns: int, d_now: float) -> int:
        a, b = link
        ma, mb = self.movers[a], self.movers[b]
        dp = np.asarray(ma.position, float) - np.asarray(mb.position, float)
        dv = np.asarray(ma.velocity, float) - np.asarray(mb.velocity, float)
        t0 = t_ns / NS_PER_S
        nxt = t_ns + self.config.update_period_ns
        delta = self.config.update_distance_m
        for target in (d_now + delta, d_now - delta):
            root = _first_crossing_after(dp, dv, t0, target)
            if root is not None:
                nxt = min(nxt, max(t_ns + 1, math.ceil(root * NS_PER_S)))
        return nxt

    def _resample(self, cs: ChannelState, t_ns: int) -> None:
        a, b = cs.link
        cfg = self.config
        d = self.distance(a, b, t_ns)
        tag = f"{a}-{b}"
        streets_differ = (
            self.movers[a].street is not None
            and self.movers[b].street is not None
            and self.movers[a].street != self.movers[b].street
        )
        if cfg.forced_state is not None:
            state = cfg.forced_state
        elif streets_differ:
            state = LinkState.NLOS
        else:
            probs = state_probabilities(cfg.scenario, d, negated_exponent=cfg.negated_exponent)
            state = sample_state(probs, self.streams.get(f"channel/state/{tag}"))
        shadow = 0.0
        blocker = None
        if state is LinkState.NLOSV:
            bstream = self.streams.get(f"channel/blocker/{tag}")
            btype = cfg.blockers[bstream.choice([bl.weight for bl in cfg.blockers])]
            blocker = btype.name
            heights = (self.antenna_heights.get(a, 1.6), self.antenna_heights.get(b, 1.6))
            shadow = nlosv_shadowing_draw(d, btype, bstream, cfg.blockers, heights, cfg.shadowing)
        fading = 0.0
        if cfg.fading_mode == "gaussian-db" and cfg.fading_sigma_db > 0:
            fading = self.streams.get(f"channel/fading/{tag}").normal(0.0, cfg.fading_sigma_db)
        cs.state = state
        cs.nlosv_shadowing_db = shadow
        cs.blocker = blocker
        cs.fading_db = fading
        cs.last_update = t_ns
        cs.distance_at_update = d
        cs.next_update = self._next_update(cs.link, t_ns, d)
        cs.updates += 1
        if self.on_update is not None:
            self.on_update(cs)

    def state(self, a: int, b: int, t_ns: int) -> ChannelState:
        link = (a, b) if a <= b else (b, a)
        cs = self.links.get(link)
        if cs is None:
            cs = self.links[link] = ChannelState(link, LinkState.LOS)
            self._resample(cs, 0)
        while cs.next_update <= t_ns:
            self._resample(cs, cs.next_update)
        return cs

    def loss_db(self, a: int, b: int, t_ns: int) -> float:
        """Pathloss plus the small-scale fading term for link (a, b) at ``t_ns``."""
        cs = self.state(a, b, t_ns)
        d = self.distance(a, b, t_ns)
        pl = pathloss_db(
            self.config.scenario, cs.state, d, self.config.frequency_ghz,
            cs.nlosv_shadowing_db, self.stats,
        )
        return pl + cs.fading_db
