"""Sectioned key-value configuration for the pipeline and CLI.

INI format with sections [signal], [segmentation], [model], [io]; every
default equals the constants the pipeline was tuned with (0.5 visibility,
11/2 filter, 2.0 s gap, 5-95 percentiles, 2.00 s / 0.30 s / 10 deg / 5-10
deg detection bounds, 2000 bootstrap replicates). Unknown sections or keys
are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .metareg import CovarianceStructure
from .segmentation import DetectionConfig
from .signal import SmoothingConfig

ENV_CONFIG = "ROMKIT_CONFIG"


@dataclass(frozen=True)
class SignalSection:
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    visibility_threshold: float = 0.5
    mapped_coverage_threshold: float = 0.6


@dataclass(frozen=True)
class ModelSection:
    participant_structure: CovarianceStructure = CovarianceStructure.UN
    exercise_structure: CovarianceStructure = CovarianceStructure.UN
    bootstrap_b: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class IoSection:
    joint_map: str | None = None
    participant_metadata: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    signal: SignalSection = field(default_factory=SignalSection)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    model: ModelSection = field(default_factory=ModelSection)
    io: IoSection = field(default_factory=IoSection)


_SIGNAL_KEYS = {
    "window_length": int,
    "poly_order": int,
    "max_gap_s": float,
    "rom_low_pct": float,
    "rom_high_pct": float,
    "visibility_threshold": float,
    "mapped_coverage_threshold": float,
}
_SEGMENTATION_KEYS = {
    "min_inter_trough_s": float,
    "min_phase_s": float,
    "min_rom_deg": float,
    "prominence_low_deg": float,
    "prominence_high_deg": float,
    "cadence_min_s": float,
    "cadence_max_s": float,
    "amplitude_fraction": float,
}
_MODEL_KEYS = {
    "participant_structure": str,
    "exercise_structure": str,
    "bootstrap_b": int,
    "seed": int,
}
_IO_KEYS = {"joint_map": str, "participant_metadata": str}

_SECTIONS = {
    "signal": _SIGNAL_KEYS,
    "segmentation": _SEGMENTATION_KEYS,
    "model": _MODEL_KEYS,
    "io": _IO_KEYS,
}


def _parse_structure(text: str) -> CovarianceStructure:
    try:
        return CovarianceStructure[text.strip().upper()]
    except KeyError:
        raise ConfigError(
            f"unknown covariance structure {text!r}; expected one of "
            f"{[s.name for s in CovarianceStructure]}"
        ) from None


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown configuration section [{section}]")
        known = _SECTIONS[section]
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[section][key] = known[key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc

    sig = values.get("signal", {})
    seg = values.get("segmentation", {})
    mod = values.get("model", {})
    io_ = values.get("io", {})
    try:
        smoothing = SmoothingConfig(
            window_length=sig.get("window_length", 11),
            poly_order=sig.get("poly_order", 2),
            max_gap=sig.get("max_gap_s", 2.0),
            rom_low_pct=sig.get("rom_low_pct", 5.0),
            rom_high_pct=sig.get("rom_high_pct", 95.0),
        )
        detection = DetectionConfig(
            min_inter_trough=seg.get("min_inter_trough_s", 2.0),
            min_phase_duration=seg.get("min_phase_s", 0.30),
            min_rom=seg.get("min_rom_deg", 10.0),
            prominence_low=seg.get("prominence_low_deg", 5.0),
            prominence_high=seg.get("prominence_high_deg", 10.0),
            cadence_min=seg.get("cadence_min_s", 0.5),
            cadence_max=seg.get("cadence_max_s", 15.0),
            amplitude_fraction=seg.get("amplitude_fraction", 0.2),
        )
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(
        signal=SignalSection(
            smoothing=smoothing,
            visibility_threshold=sig.get("visibility_threshold", 0.5),
            mapped_coverage_threshold=sig.get("mapped_coverage_threshold", 0.6),
        ),
        detection=detection,
        model=ModelSection(
            participant_structure=_parse_structure(mod.get("participant_structure", "UN")),
            exercise_structure=_parse_structure(mod.get("exercise_structure", "UN")),
            bootstrap_b=mod.get("bootstrap_b", 2000),
            seed=mod.get("seed", 0),
        ),
        io=IoSection(
            joint_map=io_.get("joint_map"),
            participant_metadata=io_.get("participant_metadata"),
        ),
    )


def load_config(path: str | None) -> PipelineConfig:
    """Read a config file; falls back to $ROMKIT_CONFIG, then to defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path is None:
        return PipelineConfig()
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_joint_map(text: str) -> dict[str, str]:
    """Exercise -> joint override file: one ``exercise = joint`` pair per line."""
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"joint map line {lineno}: expected 'exercise = joint'")
        name, joint = (part.strip() for part in stripped.split("=", 1))
        joint = joint.lower()
        if joint not in ("elbow", "shoulder"):
            raise ConfigError(f"joint map line {lineno}: joint must be elbow or shoulder")
        mapping[name.lower().replace(" ", "_")] = joint
    return mapping
