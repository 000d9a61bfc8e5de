"""Parametric positive-sequence PMU current signatures for the IEEE 13-node fault catalog.

The generator stands in for an electromagnetic-transient feeder simulation. Each
sample is a 0.1-0.3 s window at 3860 Hz of |I1| (per unit) and angle(I1)
(degrees). A fault scales the steady-state magnitude by
``1 + gain * w(t)`` inside [0.16, 0.26] s, where ``w`` is a raised-cosine gate
carrying a decaying 60 Hz transient, and shifts the angle by a type-dependent
amount.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

FAULT_TYPES = ("NoFault", "AG", "BG", "CG", "ABG", "BCG", "ACG", "ABCG")

# (label, bus, distance from substation in ft)
LOCATIONS = (
    ("F1", "646", 2800), ("F2", "645", 2500), ("F3", "632", 2000), ("F4", "633", 2500),
    ("F5", "634", 2500), ("F6", "611", 4600), ("F7", "684", 4300), ("F8", "671", 4000),
    ("F9", "692", 4000), ("F10", "675", 4500), ("F11", "652", 5100), ("F12", "680", 5000),
    ("F13", "650", 0), ("F14", "650a", 500), ("F15", "650b", 1000), ("F16", "632a", 2500),
    ("F17", "632b", 3000), ("F18", "632c", 3500), ("F19", "684a", 4500), ("F20", "671a", 4800),
)
LOCATION_LABELS = tuple(lbl for lbl, _, _ in LOCATIONS)
DISTANCE_FT = {lbl: d for lbl, _, d in LOCATIONS}

RESISTANCES_OHM = (0.01, 0.10, 1, 5, 10, 20, 40)
INCEPTION_DEG = (0, 30, 60, 90, 120, 150, 180)
PMU_IDS = (1, 2, 3, 4)
PMU_GAIN = {1: 1.0, 2: 0.8, 3: 0.6, 4: 0.5}

SAMPLE_RATE_HZ = 3860
T_START, T_END = 0.1, 0.3
N_RAW = round((T_END - T_START) * SAMPLE_RATE_HZ)  # 772
FAULT_ON, FAULT_OFF = 0.16, 0.26
EDGE_S = 0.002
F_SYS = 60.0

BASE_GAIN = {"LG": 2.0, "LLG": 3.2, "LLLG": 4.5}
PHASE_SHIFT_DEG = {"LG": -25.0, "LLG": -40.0, "LLLG": -5.0}
LLG_OSC_DEG = 8.0
TRANSIENT_AMP = 0.35
TRANSIENT_TAU_S = 0.02
# decay constants cycled over buses in distance order, so buses with nearly
# equal attenuation still differ in how fast the fault transient dies out
TAU_CYCLE_S = (0.012, 0.018, 0.026, 0.036)
# point-on-wave offset of the faulted phase(s) relative to phase A
FAULTED_PHASE_DEG = {"AG": 0.0, "BG": -120.0, "CG": 120.0, "ABG": -60.0, "BCG": 180.0,
                     "ACG": 60.0, "ABCG": 0.0}
RIPPLE = 0.003
BASE_ANGLE_DEG = -30.0
NOFAULT_LOAD_SLOPE = 0.01
DER_LOAD_SLOPE = 0.004
DER_INFEED_SLOPE = 0.002
LOC_OFFSET = 0.015

_GROUP = {"AG": ("LG", 0), "BG": ("LG", 1), "CG": ("LG", 2),
          "ABG": ("LLG", 0), "BCG": ("LLG", 1), "ACG": ("LLG", 2), "ABCG": ("LLLG", 0)}

# Offset index counts from the farthest bus, so the location factor stays
# strictly decreasing in distance and same-distance buses stay apart.
_far_order = sorted(range(len(LOCATIONS)), key=lambda i: (-LOCATIONS[i][2], -i))
_LOC_RANK = {LOCATIONS[i][0]: r for r, i in enumerate(_far_order)}


class ScenarioError(ValueError):
    pass


# --- phasor algebra --------------------------------------------------------

A_OP = complex(math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3))


def phasor(magnitude, angle_deg):
    """Complex phasor(s) from magnitude and angle in degrees."""
    return np.asarray(magnitude) * np.exp(1j * np.deg2rad(angle_deg))


def positive_sequence(ia, ib, ic):
    """I1 = (Ia + a Ib + a² Ic) / 3 with a = 1∠120°; works elementwise on arrays."""
    return (np.asarray(ia) + A_OP * np.asarray(ib) + A_OP * A_OP * np.asarray(ic)) / 3.0


def magnitude_angle(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z)
    return np.hypot(z.real, z.imag), np.rad2deg(np.arctan2(z.imag, z.real))


# --- scenario -----------------------------------------------------------------

@dataclass(frozen=True)
class FaultScenario:
    fault_type: str
    location: str
    resistance_ohm: float = 0.01
    inception_deg: float = 0
    der_level_pct: float = 0.0
    noise_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.fault_type not in FAULT_TYPES:
            raise ScenarioError(f"unknown fault type {self.fault_type!r}")
        if self.location not in DISTANCE_FT:
            raise ScenarioError(f"unknown location {self.location!r}")
        if self.resistance_ohm not in RESISTANCES_OHM:
            raise ScenarioError(f"resistance {self.resistance_ohm} not in {RESISTANCES_OHM}")
        if self.inception_deg not in INCEPTION_DEG:
            raise ScenarioError(f"inception angle {self.inception_deg} not in {INCEPTION_DEG}")
        if not 0.0 <= self.der_level_pct <= 80.0:
            raise ScenarioError(f"DER level {self.der_level_pct} outside [0, 80]")
        if not 0.0 <= self.noise_pct <= 3.0:
            raise ScenarioError(f"noise {self.noise_pct} outside [0, 3]")

    @property
    def distance_ft(self) -> int:
        return DISTANCE_FT[self.location]

    @property
    def type_label(self) -> int:
        return FAULT_TYPES.index(self.fault_type)

    @property
    def location_label(self) -> int:
        return LOCATION_LABELS.index(self.location)

    def digest(self) -> int:
        """Stable 64-bit hash of the scenario fields (independent of PYTHONHASHSEED)."""
        key = "|".join(f"{k}={float(v)!r}" if isinstance(v, (int, float)) and k != "seed"
                       else f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


@dataclass
class PhasorSequence:
    pmu_id: int
    magnitude: np.ndarray
    phase_deg: np.ndarray
    scenario: FaultScenario
    t_start_s: float = T_START
    t_end_s: float = T_END
    sample_rate_hz: int = SAMPLE_RATE_HZ

    @property
    def time(self) -> np.ndarray:
        return sample_times(len(self.magnitude))


def sample_times(n: int = N_RAW) -> np.ndarray:
    return T_START + np.arange(n) / SAMPLE_RATE_HZ


# --- signature model ----------------------------------------------------------

def location_factor(location: str) -> float:
    """Electrical-distance attenuation of fault infeed seen from the substation PMUs."""
    return 1.0 / (1.0 + DISTANCE_FT[location] / 2500.0) + LOC_OFFSET * _LOC_RANK[location]


def resistance_factor(r_ohm: float) -> float:
    return 1.0 / (1.0 + r_ohm / 10.0)


def type_gain(fault_type: str, der_pct: float = 0.0) -> float:
    group, pos = _GROUP[fault_type]
    return BASE_GAIN[group] + 0.1 * pos + DER_INFEED_SLOPE * der_pct


def fault_gain(scenario: FaultScenario, pmu_id: int) -> float:
    """Peak in-fault magnitude multiplier (excluding the transient) for one PMU."""
    if scenario.fault_type == "NoFault":
        return 0.0
    return (type_gain(scenario.fault_type, scenario.der_level_pct) * PMU_GAIN[pmu_id]
            * location_factor(scenario.location) * resistance_factor(scenario.resistance_ohm))


def transient_tau(location: str) -> float:
    return TAU_CYCLE_S[_LOC_RANK[location] % len(TAU_CYCLE_S)]


def gate(t: np.ndarray) -> np.ndarray:
    """1 inside the fault window with 2 ms raised-cosine edges, 0 outside."""
    g = np.zeros_like(t)
    rise = (t >= FAULT_ON) & (t < FAULT_ON + EDGE_S)
    g[rise] = 0.5 * (1 - np.cos(np.pi * (t[rise] - FAULT_ON) / EDGE_S))
    g[(t >= FAULT_ON + EDGE_S) & (t <= FAULT_OFF - EDGE_S)] = 1.0
    fall = (t > FAULT_OFF - EDGE_S) & (t <= FAULT_OFF)
    g[fall] = 0.5 * (1 + np.cos(np.pi * (t[fall] - (FAULT_OFF - EDGE_S)) / EDGE_S))
    return g


def inception_time(inception_deg: float) -> float:
    return FAULT_ON + (inception_deg / 360.0) / F_SYS


def transient(t: np.ndarray, inception_deg: float, phase_deg: float = 0.0,
              tau_s: float = TRANSIENT_TAU_S) -> np.ndarray:
    """Decaying 60 Hz oscillation starting at fault onset, phased to the faulted conductor."""
    t_inc = inception_time(inception_deg)
    decay = np.exp(-np.clip(t - FAULT_ON, 0.0, None) / tau_s)
    return decay * np.cos(2 * np.pi * F_SYS * (t - t_inc) + np.deg2rad(phase_deg))


def fault_waveform(t: np.ndarray, inception_deg: float, phase_deg: float = 0.0,
                   tau_s: float = TRANSIENT_TAU_S) -> np.ndarray:
    """Gate times (1 + decaying 60 Hz transient)."""
    return gate(t) * (1.0 + TRANSIENT_AMP * transient(t, inception_deg, phase_deg, tau_s))


def phase_shift(t: np.ndarray, fault_type: str, inception_deg: float,
                tau_s: float = TRANSIENT_TAU_S) -> np.ndarray:
    group, _ = _GROUP[fault_type]
    shift = PHASE_SHIFT_DEG[group] * (
        1.0 + TRANSIENT_AMP * transient(t, inception_deg, FAULTED_PHASE_DEG[fault_type], tau_s))
    if group == "LLG":
        shift += LLG_OSC_DEG * np.sin(2 * np.pi * 2 * F_SYS * (t - inception_time(inception_deg)))
    return gate(t) * shift


def _rng(scenario: FaultScenario, pmu_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([scenario.seed, scenario.digest(), pmu_id, stream])


def generate(scenario: FaultScenario, pmu_id: int) -> PhasorSequence:
    """Deterministic |I1|, angle(I1) window for ``scenario`` as seen by PMU ``pmu_id``."""
    if pmu_id not in PMU_GAIN:
        raise ScenarioError(f"pmu_id {pmu_id} not in {PMU_IDS}")
    t = sample_times()
    i_pre = 1.0 + DER_LOAD_SLOPE * scenario.der_level_pct
    ripple = _rng(scenario, pmu_id, 0).uniform(-RIPPLE, RIPPLE, size=t.size)
    if scenario.fault_type == "NoFault":
        level = 1.0 + NOFAULT_LOAD_SLOPE * location_factor(scenario.location)
        mag = i_pre * level * (1.0 + ripple)
        ph = np.full_like(t, BASE_ANGLE_DEG)
    else:
        k = fault_gain(scenario, pmu_id)
        tau = transient_tau(scenario.location)
        psi = FAULTED_PHASE_DEG[scenario.fault_type]
        mag = i_pre * (1.0 + ripple + k * fault_waveform(t, scenario.inception_deg, psi, tau))
        ph = BASE_ANGLE_DEG + location_factor(scenario.location) * phase_shift(
            t, scenario.fault_type, scenario.inception_deg, tau)
    seq = PhasorSequence(pmu_id, mag, ph, scenario)
    if scenario.noise_pct > 0:
        seq = add_noise(seq, scenario.noise_pct, _rng(scenario, pmu_id, 1))
    return seq


def add_noise(seq: PhasorSequence, noise_pct: float, seed) -> PhasorSequence:
    """Add N(0, (noise_pct/100)·std(channel)) independently per sample and channel."""
    if noise_pct < 0:
        raise ValueError(f"noise_pct must be non-negative, got {noise_pct}")
    if noise_pct > 3:
        raise ValueError(f"noise_pct {noise_pct} above the supported 3%")
    if noise_pct == 0:
        return replace(seq, magnitude=seq.magnitude.copy(), phase_deg=seq.phase_deg.copy())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    frac = noise_pct / 100.0
    mag = seq.magnitude + rng.normal(0.0, frac * seq.magnitude.std(), seq.magnitude.shape)
    ph = seq.phase_deg + rng.normal(0.0, frac * seq.phase_deg.std(), seq.phase_deg.shape)
    return replace(seq, magnitude=mag, phase_deg=ph)


# --- dataset enumeration ---------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    fault_types: tuple[str, ...] = FAULT_TYPES
    locations: tuple[str, ...] = LOCATION_LABELS
    resistances: tuple[float, ...] = (0.01, 10)
    inception_angles: tuple[float, ...] = (0, 90)
    der_levels: tuple[float, ...] = (0.0,)
    pmus: tuple[int, ...] = PMU_IDS
    per_cell: int = 1
    noise_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.fault_types:
            raise ScenarioError("empty class set")
        for name in ("locations", "resistances", "inception_angles", "der_levels", "pmus"):
            if not getattr(self, name):
                raise ScenarioError(f"generator config has no {name}")
        if self.per_cell < 1:
            raise ScenarioError(f"per_cell must be >= 1, got {self.per_cell}")

    @classmethod
    def full_grid(cls, **kw) -> "GeneratorConfig":
        return cls(resistances=RESISTANCES_OHM, inception_angles=INCEPTION_DEG, **kw)

    def n_rows(self) -> int:
        return (len(self.fault_types) * len(self.locations) * len(self.resistances)
                * len(self.inception_angles) * len(self.der_levels) * self.per_cell * len(self.pmus))

    def scenarios(self):
        """Yield (event_id, scenario) in a fixed enumeration order."""
        grid = itertools.product(self.fault_types, self.locations, self.resistances,
                                 self.inception_angles, self.der_levels, range(self.per_cell))
        for event_id, (ft, loc, r, ang, der, rep) in enumerate(grid):
            yield event_id, FaultScenario(ft, loc, r, ang, der, self.noise_pct, self.seed + rep)


@dataclass
class DatasetManifest:
    config: GeneratorConfig
    n_rows: int
    type_counts: dict[str, int] = field(default_factory=dict)
    location_counts: dict[str, int] = field(default_factory=dict)


def build_dataset(config: GeneratorConfig, out_path) -> DatasetManifest:
    """Generate every (scenario, PMU) row of ``config`` into a CSV plus manifest sidecar."""
    from .pipeline import Dataset, write_dataset, write_manifest

    rows = []
    for event_id, sc in config.scenarios():
        for pmu in config.pmus:
            rows.append((event_id, generate(sc, pmu)))
    ds = Dataset.from_sequences(rows)
    out_path = Path(out_path)
    write_dataset(ds, out_path)
    manifest = DatasetManifest(
        config, len(ds),
        {ft: int(np.sum(ds.fault_type == i)) for i, ft in enumerate(FAULT_TYPES)
         if ft in config.fault_types},
        {loc: int(np.sum(ds.location == i)) for i, loc in enumerate(LOCATION_LABELS)
         if loc in config.locations})
    write_manifest(manifest, manifest_path(out_path))
    return manifest


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".manifest")
