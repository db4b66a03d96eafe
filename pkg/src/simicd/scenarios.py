"""
Virtual patients and run configuration.

Four sheet presets stand in for the cohort: a plain sheet, a sheet with an
outflow-tract ectopic focus, and two sheets with an isthmus scar placed
left or right of centre. A :class:`Scenario` pairs a patient with an
episode (sinus rhythm, focal bursts or re-entry), device settings and a run
length. Run configurations are JSON documents validated against
:data:`RUN_CONFIG_SCHEMA` before anything is simulated.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from .device_logic import DetectionParams, ZoneId
from .egm import Electrode, LeadConfig
from .ep.grid import add_elliptical_scar, sheet
from .ep.ionic import IonicParams
from .ep.reentry import InductionProtocol
from .ep.tuning import tune_conductivity
from .therapy import AtpParams, AtpZoneParams, TherapyCounters

__all__ = [
    "PatientPreset",
    "ScarSpec",
    "PATIENTS",
    "NsrEpisode",
    "FocalEpisode",
    "ReentrantEpisode",
    "OrchestratorParams",
    "IcdConfig",
    "Scenario",
    "ConfigError",
    "RUN_CONFIG_SCHEMA",
    "load_run_config",
    "scenario_from_config",
    "build_grid",
]


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 2)."""


# Membrane kinetics of the patient presets. The generic defaults in
# IonicParams give a short-wavelength medium in which a 50 mm sheet cannot
# hold a re-entrant circuit in the VT zones; the presets trade a slower
# upstroke and slower conduction for circuits with 300-430 ms cycles.
PRESET_IONIC = IonicParams(tau_in=0.6, tau_out=12.0, tau_open=90.0, tau_close=100.0)
PRESET_CV = 0.334  # mm/ms


@dataclass(frozen=True)
class ScarSpec:
    """
    Elliptical scar with a conducting isthmus. The isthmus and a rim
    ``border_mm`` wide form a border zone with ``tau_close`` scaled by
    ``border_tau_close_scale``.
    """

    center_mm: tuple
    semi_axes_mm: tuple
    isthmus_width_mm: float = 3.0
    border_mm: float = 0.0
    border_tau_close_scale: float = 1.0


@dataclass(frozen=True)
class PatientPreset:
    """
    Geometry and lead placement of one virtual patient.

    ``episodes`` lists the episode types the patient supports.
    """

    pid: int
    name: str
    width_mm: float = 50.0
    height_mm: float = 50.0
    dx_mm: float = 0.5
    cv_mm_per_ms: float = PRESET_CV
    ionic: IonicParams = PRESET_IONIC
    sinus_strip_mm: float = 1.5
    ectopic: dict = field(default_factory=dict)  # name -> (x, y, radius) mm
    scar: ScarSpec | None = None
    tip_mm: tuple = (40.0, 10.0, 1.0)
    ring_mm: tuple = (42.0, 12.0, 1.0)
    episodes: tuple = ("nsr",)
    isthmus_factor: float = 0.2  # default for reentrant episodes
    induction: InductionProtocol = field(default_factory=InductionProtocol)

    def leads(self, gain_mV=1.0):
        tx, ty, tz = self.tip_mm
        rx, ry, rz = self.ring_mm
        return LeadConfig(
            tip=Electrode.point("tip", tx, ty, tz),
            ring=Electrode.point("ring", rx, ry, rz),
            gain_mV=gain_mV,
        )


# Re-entry presets: a slow isthmus (40% conductivity) whose tissue has a
# prolonged refractory period (tau_close 180 ms), in a sheet whose own
# tau_close is 110 ms, induced by a 4-beat S1 train at 350 ms. This gives a
# ~364 ms VT1-zone circuit. The tip tissue recovers between 0.81 and 0.88 of
# the cycle, so 81% trains lose capture while 88% trains of 10 or more
# pulses reach the isthmus early enough to block it.
_SCAR_IONIC = replace(PRESET_IONIC, tau_close=110.0)
_ISTHMUS_SCAR = dict(semi_axes_mm=(9.0, 15.0), isthmus_width_mm=3.0, border_mm=0.0,
                     border_tau_close_scale=180.0 / 110.0)
_VT_INDUCTION = InductionProtocol(s1_count=4, s1_cl_ms=350.0)

PATIENTS = {
    0: PatientPreset(0, "plain sheet"),
    1: PatientPreset(1, "outflow-tract focus", ectopic={"rvot": (40.0, 46.0, 1.5)}, episodes=("nsr", "focal")),
    2: PatientPreset(2, "left isthmus scar", scar=ScarSpec((20.0, 25.0), **_ISTHMUS_SCAR),
                     tip_mm=(9.0, 45.0, 1.0), ring_mm=(11.0, 47.0, 1.0), episodes=("nsr", "reentrant"),
                     isthmus_factor=0.4, induction=_VT_INDUCTION, ionic=_SCAR_IONIC),
    3: PatientPreset(3, "right isthmus scar", scar=ScarSpec((30.0, 25.0), **_ISTHMUS_SCAR),
                     tip_mm=(41.0, 45.0, 1.0), ring_mm=(39.0, 47.0, 1.0), episodes=("nsr", "reentrant"),
                     isthmus_factor=0.4, induction=_VT_INDUCTION, ionic=_SCAR_IONIC),
}


@functools.lru_cache(maxsize=16)
def _tuned_diffusivity(cv, ionic, dx_mm, dt_ms):
    return tune_conductivity(cv, ionic, dx_mm, dt_ms)


def build_grid(patient, isthmus_factor=None, dt_ms=0.05):
    """Tissue grid for a preset, with the scar isthmus scaled by ``isthmus_factor``."""
    p = PATIENTS[patient] if isinstance(patient, int) else patient
    d0 = _tuned_diffusivity(p.cv_mm_per_ms, p.ionic, p.dx_mm, dt_ms)
    g = sheet(p.width_mm, p.height_mm, p.dx_mm, d0)
    X, Y = g.coords()
    sinus = X <= p.sinus_strip_mm
    ectopic = {name: (X - x) ** 2 + (Y - y) ** 2 <= r * r for name, (x, y, r) in p.ectopic.items()}
    tx, ty, _ = p.tip_mm
    g = replace(g, sinus_site=sinus, ectopic_sites=ectopic, tip_footprint=g.block_at(tx, ty))
    if p.scar is not None:
        factor = 1.0 if isthmus_factor is None else isthmus_factor
        g = add_elliptical_scar(g, p.scar.center_mm, p.scar.semi_axes_mm, p.scar.isthmus_width_mm, factor,
                                p.scar.border_mm, p.scar.border_tau_close_scale)
        if np.any(g.scar_mask & (g.sinus_site | g.tip_footprint)):
            raise ConfigError("scar overlaps the sinus site or the pacing tip")
    return g


# ---------------------------------------------------------------- episodes

@dataclass(frozen=True)
class NsrEpisode:
    kind: str = "nsr"


@dataclass(frozen=True)
class FocalEpisode:
    """Ectopic bursts; beat count and cycle length are drawn per burst from the ranges."""

    site: str = "rvot"
    n_beats: tuple = (8, 10)
    cl_ms: tuple = (400.0, 500.0)
    n_episodes: int = 3
    gap_ms: float = 6000.0
    start_ms: float = 4000.0
    kind: str = "focal"

    def bursts(self, seed):
        """``[(onset, n_beats, cl), ...]`` for this seed."""
        rng = np.random.default_rng(seed)
        out = []
        t = self.start_ms
        for _ in range(self.n_episodes):
            n = int(rng.integers(self.n_beats[0], self.n_beats[1] + 1))
            cl = float(rng.uniform(self.cl_ms[0], self.cl_ms[1]))
            cl = round(cl)
            out.append((t, n, cl))
            t += n * cl + self.gap_ms
        return out


@dataclass(frozen=True)
class ReentrantEpisode:
    isthmus_factor: float | None = None  # None: the patient's calibrated value
    direction: int = 0  # which isthmus end is blocked during induction
    kind: str = "reentrant"


# ---------------------------------------------------------------- settings

@dataclass(frozen=True)
class OrchestratorParams:
    segment_ms: int = 500
    checkpoint_ms: int = 1000
    observation_ms: float = 10000.0
    max_extension_ms: float = 30000.0  # cap on running past the nominal end while a therapy is unresolved
    slow_beats: int = 10
    blanking_ms: float = 300.0
    charge_delay_ms: float = 2000.0
    shock_duration_ms: float = 10.0
    shock_amplitude: float = 5000.0
    max_shocks: int = 1
    sinus_cl_ms: float = 800.0
    sinus_amplitude: float = 450.0
    nsr_warmup_ms: float = 8000.0
    target_nf_peak_mV: float = 5.0

    def __post_init__(self):
        if self.segment_ms <= 0 or self.checkpoint_ms <= 0:
            raise ValueError("segment and checkpoint cadence must be positive")
        if self.checkpoint_ms % self.segment_ms:
            raise ValueError("checkpoint cadence must be a multiple of the segment length")


@dataclass(frozen=True)
class IcdConfig:
    detection: DetectionParams = field(default_factory=DetectionParams)
    atp: AtpParams = field(default_factory=AtpParams)
    max_t: dict = field(default_factory=lambda: dict(TherapyCounters().max_t))
    sensing_refractory_ms: float = 150.0

    def counters(self):
        return TherapyCounters(max_t=dict(self.max_t))


@dataclass(frozen=True)
class Scenario:
    patient: int
    episode: object = field(default_factory=NsrEpisode)
    icd: IcdConfig = field(default_factory=IcdConfig)
    duration_ms: float = 30000.0
    seed: int = 0
    dt_ms: float = 0.05
    orchestrator: OrchestratorParams = field(default_factory=OrchestratorParams)
    induction: InductionProtocol | None = None  # None: the patient's protocol

    def __post_init__(self):
        if not self.duration_ms > 0:
            raise ValueError("duration must be positive")
        if not isinstance(self.patient, PatientPreset) and self.patient not in PATIENTS:
            raise ValueError(f"unknown patient {self.patient}")
        p = self.preset
        kind = self.episode.kind
        if kind not in p.episodes:
            raise ValueError(f"patient {p.pid} has no {kind} episodes")
        if kind == "focal" and self.episode.site not in p.ectopic:
            raise ValueError(f"patient {p.pid} has no ectopic site {self.episode.site!r}")

    @property
    def preset(self):
        """The patient preset; ``patient`` is a cohort index or a custom preset."""
        return self.patient if isinstance(self.patient, PatientPreset) else PATIENTS[self.patient]

    @property
    def patient_id(self):
        return self.preset.pid

    @property
    def induction_protocol(self):
        """Induction protocol with the episode's blocked isthmus end."""
        base = self.induction or self.preset.induction
        return replace(base, block_end=getattr(self.episode, "direction", base.block_end))

    def grid(self):
        f = None
        if self.episode.kind == "reentrant":
            f = self.episode.isthmus_factor
            f = self.preset.isthmus_factor if f is None else f
        return build_grid(self.preset, f, self.dt_ms)


# ---------------------------------------------------------------- JSON config

_zone_numbers = {"type": "object", "additionalProperties": False,
                 "properties": {z.name: {"type": "number", "exclusiveMinimum": 0} for z in ZoneId}}
_atp_zone = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "pulse_interval_pct": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
        "coupling_interval_pct": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
        "n_pulses": {"type": "integer", "minimum": 1},
        "ramp_decrement_ms": {"type": "number", "minimum": 0},
        "min_interval_ms": {"type": "number", "minimum": 0},
    },
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["patient", "episode", "duration_ms"],
    "properties": {
        "patient": {"type": "integer", "enum": sorted(PATIENTS)},
        "episode": {
            "type": "object",
            "required": ["type"],
            "oneOf": [
                {"additionalProperties": False,
                 "properties": {"type": {"const": "nsr"}}},
                {"additionalProperties": False,
                 "properties": {
                     "type": {"const": "focal"},
                     "site": {"type": "string"},
                     "n_beats": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                 "minItems": 2, "maxItems": 2},
                     "cl_ms": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                               "minItems": 2, "maxItems": 2},
                     "n_episodes": {"type": "integer", "minimum": 1},
                     "gap_ms": {"type": "number", "minimum": 0},
                     "start_ms": {"type": "number", "minimum": 0}}},
                {"additionalProperties": False,
                 "properties": {
                     "type": {"const": "reentrant"},
                     "isthmus_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                     "direction": {"type": "integer", "enum": [0, 1]}}},
            ],
        },
        "duration_ms": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "dt_ms": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.1},
        "icd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "th_ms": _zone_numbers,
                "dur_ms": _zone_numbers,
                "redetect_dur_ms": _zone_numbers,
                "vtc_threshold": {"type": "number", "minimum": -1, "maximum": 1},
                "corr_count_max": {"type": "integer", "minimum": 0, "maximum": 10},
                "max_t": {"type": "object", "additionalProperties": False,
                          "properties": {z.name: {"type": "integer", "minimum": 0} for z in ZoneId}},
                "atp": {"type": "object", "additionalProperties": False,
                        "properties": {"VT1": _atp_zone, "VT": _atp_zone, "VF1": _atp_zone}},
                "charge_delay_ms": {"type": "number", "minimum": 0},
            },
        },
        "orchestrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "segment_ms": {"type": "integer", "minimum": 1},
                "checkpoint_ms": {"type": "integer", "minimum": 1},
                "observation_ms": {"type": "number", "exclusiveMinimum": 0},
                "slow_beats": {"type": "integer", "minimum": 1},
                "max_extension_ms": {"type": "number", "minimum": 0},
                "nsr_warmup_ms": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output_dir": {"type": "string"},
        "plots": {"type": "boolean"},
        "verbosity": {"type": "integer", "minimum": 0, "maximum": 3},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "zone": {"type": "string", "enum": ["VT1", "VT"]},
                "pulse_interval_pct": {"type": "array", "items": {"type": "number"}},
                "n_pulses": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "ramp_decrement_ms": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
    },
}


def _format_error(err):
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "required":
        return f"{where}: missing required key {err.message.split(' ')[0]}"
    if err.validator == "additionalProperties":
        return f"{where}: {err.message}"
    if err.validator == "oneOf" and "type" in err.instance:
        # report against the branch matching the declared episode type
        for sub in err.context:
            if sub.validator != "const":
                return _format_error(sub)
    return f"{where}: {err.message}"


def validate_run_config(doc):
    """Raise :class:`ConfigError` listing every schema violation."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_format_error(e) for e in errors))


def load_run_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    validate_run_config(doc)
    return doc


def _episode(doc):
    doc = dict(doc)
    kind = doc.pop("type")
    if kind == "nsr":
        return NsrEpisode()
    if kind == "focal":
        for k in ("n_beats", "cl_ms"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return FocalEpisode(**doc)
    return ReentrantEpisode(**doc)


def icd_from_config(doc):
    doc = doc or {}
    base = DetectionParams()
    det = DetectionParams(
        th={**{z.name: v for z, v in base.th.items()}, **doc.get("th_ms", {})},
        dur={**{z.name: v for z, v in base.dur.items()}, **doc.get("dur_ms", {})},
        redetect_dur={**{z.name: v for z, v in base.redetect_dur.items()}, **doc.get("redetect_dur_ms", {})},
        vtc_threshold=doc.get("vtc_threshold", base.vtc_threshold),
        corr_count_max=doc.get("corr_count_max", base.corr_count_max),
    )
    atp = AtpParams()
    for zone, zp in doc.get("atp", {}).items():
        atp = atp.with_zone(zone, replace(atp[ZoneId[zone]], **zp))
    max_t = dict(TherapyCounters().max_t)
    max_t.update({ZoneId[k]: v for k, v in doc.get("max_t", {}).items()})
    return IcdConfig(det, atp, max_t)


def scenario_from_config(doc):
    """Build a :class:`Scenario` from a validated config document."""
    try:
        orch = OrchestratorParams(**doc.get("orchestrator", {}))
        icd = icd_from_config(doc.get("icd"))
        if "charge_delay_ms" in doc.get("icd", {}):
            orch = replace(orch, charge_delay_ms=doc["icd"]["charge_delay_ms"])
        return Scenario(
            patient=doc["patient"],
            episode=_episode(doc["episode"]),
            icd=icd,
            duration_ms=float(doc["duration_ms"]),
            seed=int(doc.get("seed", 0)),
            dt_ms=float(doc.get("dt_ms", 0.05)),
            orchestrator=orch,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def with_atp(scenario, zone, params):
    """Copy of ``scenario`` with one zone's ATP settings replaced."""
    zone = ZoneId[zone] if isinstance(zone, str) else zone
    params = params if isinstance(params, AtpZoneParams) else AtpZoneParams(**params)
    icd = replace(scenario.icd, atp=scenario.icd.atp.with_zone(zone, params))
    return replace(scenario, icd=icd)
