"""Scenario files: schema, loading and physics sanity checks."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError

SHIPPED_SCENARIOS = ("spectroscopy_350um", "single_superatom_17um", "chain_126um")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StateSpec(_Strict):
    n: int = Field(ge=1)
    l: int = Field(ge=0)
    j: float
    mj: float


class FieldSpec(_Strict):
    B: float = Field(13.3, ge=0)
    theta: float = Field(90.0, ge=0, le=180)


class PairSpec(_Strict):
    n_fixed: StateSpec = StateSpec(n=27, l=3, j=3.5, mj=3.5)
    nprime: int = 96
    windows: tuple[int, int, int, int] = (2, 2, 2, 2)
    prune_mhz: Optional[float] = 30e3
    scan_prune_mhz: Optional[float] = 10e3
    nprime_range: tuple[int, int] = (82, 104)
    theta_grid: tuple[float, ...] = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0)
    r_max: float = 40.0
    n_fit_points: int = Field(16, ge=5)
    forster_n_range: tuple[int, int] = (24, 32)
    forster_nprime_range: tuple[int, int] = (80, 130)


class CloudSpec(_Strict):
    sigma_r: float = Field(6.0, gt=0)
    n0: float = Field(0.39, gt=0)
    a_x: float = Field(126.0, gt=0)
    x_extent: float = Field(420.0, gt=0)


class EitSpec(_Strict):
    omega_p: float = 0.9
    omega_c_eff: float = Field(5.9, ge=0)
    gamma_e: float = Field(6.07, gt=0)
    gamma_gr: float = Field(2.9, ge=0)
    delta_p: float = 0.0
    delta_c: float = -3.74005


class SpectrumSpec(_Strict):
    delta_min: float = -10.0
    delta_max: float = 15.0
    n_points: int = Field(501, ge=3)
    impurity_spacing: float = Field(29.0, gt=0)
    c6_r0: float = -1010.0
    c6_r1: float = -9.3
    column_step: float = Field(0.5, gt=0)


class ChainSpec(_Strict):
    n_atoms: int = Field(5, ge=1)
    r_block: float = Field(14.7, ge=0)
    blockade_rule: Literal["radius", "diameter"] = "radius"
    transverse_jitter: bool = True
    n_shots: int = Field(2000, ge=1)


class SpotSpec(_Strict):
    amplitude_mean: float = Field(0.15, gt=0, lt=1)
    amplitude_std: float = Field(0.03, ge=0)
    sigma_x: float = Field(6.2, gt=0)
    sigma_y: float = Field(5.2, gt=0)
    placement_jitter: float = Field(0.0, ge=0)


class NoiseSpec(_Strict):
    white_std: float = Field(0.048, ge=0)
    fringe_amplitude: float = Field(0.0, ge=0)
    fringe_period: float = Field(40.0, gt=0)
    snr_scale: float = Field(1.0, gt=0)
    correlation_px: float = Field(0.8, ge=0)


class DetectionSpec(_Strict):
    pixel_pitch: float = Field(2.48, gt=0)
    filter_px: float = Field(2.0, ge=0)
    a_thld: float = Field(0.045, ge=0)
    min_separation_px: float = Field(5.0, ge=0)
    y_band: float = Field(12.0, gt=0)
    off_region_gap: float = Field(10.0, ge=0)
    fit: bool = True


class AnalysisSpec(_Strict):
    bin_width: float = Field(2.48, gt=0)
    n_target: int = Field(5, ge=2)
    fft_window: Optional[Literal["hann"]] = None


class Scenario(_Strict):
    name: str
    seed: int = 0
    quantum_defects: Optional[str] = None  # path; None selects the bundled Rb87 table
    field: FieldSpec = FieldSpec()
    pair: PairSpec = PairSpec()
    cloud: CloudSpec = CloudSpec()
    eit: EitSpec = EitSpec()
    spectrum: SpectrumSpec = SpectrumSpec()
    chain: ChainSpec = ChainSpec()
    spot: SpotSpec = SpotSpec()
    noise: NoiseSpec = NoiseSpec()
    detection: DetectionSpec = DetectionSpec()
    analysis: AnalysisSpec = AnalysisSpec()

    @field_validator("cloud")
    @classmethod
    def _extent_covers_region(cls, v: CloudSpec):
        if v.a_x > v.x_extent:
            raise ValueError("cloud.a_x exceeds cloud.x_extent")
        return v

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **sections) -> "Scenario":
        """Copy with per-section field overrides, e.g. chain={"n_shots": 50}."""
        data = self.model_dump()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(data.get(key), dict):
                data[key].update(val)
            else:
                data[key] = val
        return Scenario.model_validate(data)


def _format_validation(err: ValidationError, source: str) -> str:
    lines = [f"{source}: schema violation"]
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        if e["type"] == "extra_forbidden":
            lines.append(f"  unknown key '{loc}'")
        else:
            lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


def scenario_path(name_or_path: str | Path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    if str(name_or_path) in SHIPPED_SCENARIOS:
        return Path(str(resources.files("superatom_lab.scenarios") / f"{name_or_path}.yaml"))
    raise ConfigurationError(f"scenario not found: {name_or_path}")


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"{source}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: scenario must be a mapping")
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc, source)) from exc


def load_scenario(name_or_path: str | Path) -> Scenario:
    p = scenario_path(name_or_path)
    return parse_scenario(p.read_text(), str(p))


def sanity_warnings(sc: Scenario) -> list[str]:
    """Physics consistency checks that do not block loading."""
    out = []
    gap = sc.chain.r_block * (2 if sc.chain.blockade_rule == "diameter" else 1)
    seg = sc.cloud.a_x / sc.chain.n_atoms
    if sc.chain.n_atoms > 1 and gap > 0 and seg <= gap:
        out.append(f"chainmc: a_x/N = {seg:.3g} um does not exceed the blockade gap {gap:.3g} um; "
                   "the chain model has zero acceptance probability")
    off_hi = 2 * sc.cloud.a_x + sc.detection.off_region_gap
    half_extra = (sc.cloud.x_extent - sc.cloud.a_x) / 2
    if off_hi > sc.cloud.a_x + half_extra:
        out.append("imaging: the off-region control window extends beyond the imaged x_extent")
    if sc.detection.y_band < 2 * sc.cloud.sigma_r and sc.chain.transverse_jitter:
        out.append("imaging: y_band is narrower than the transverse jitter cut-off (2 sigma_r)")
    if sc.eit.omega_c_eff == 0:
        out.append("eitmodel: omega_c_eff = 0 disables EIT entirely")
    return out
