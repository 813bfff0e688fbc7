"""Run configuration: dataclasses plus a sectioned TOML file format.

Every key is optional; omitted keys keep the defaults below. Unknown keys
are rejected so typos do not silently fall back to defaults.

```toml
version = 1
variant = "lmpcc-stp"      # mpcc | lmpcc-gp | lmpcc-stp
seed = 0
timeout = 30.0
models = "models.json"     # trained process file, learning variants only
out = "runs"

[scenario]   # kind, speed_kmh, plus any DLCGeometry field
[vehicle]    # VehicleParams fields
[tyre]       # nominal Fiala stiffnesses C_alpha_f, C_alpha_r
[plant]      # PlantConfig fields
[controller] # OCPConfig fields
```
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .mpcc import ControllerVariant, OCPConfig
from .track import DLCGeometry, Scenario, dlc_scenario, straight_scenario
from .vehicle import FialaParams, PacejkaAxle, PacejkaParams, PlantParams, VehicleParams

CONFIG_VERSION = 1
SCENARIO_KINDS = ("dlc", "dlc-priority", "straight")


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "dlc"
    speed_kmh: float = 55.0
    geometry: DLCGeometry = field(default_factory=DLCGeometry)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    def build(self) -> Scenario:
        if self.kind == "straight":
            return straight_scenario(self.speed_kmh, length=self.geometry.length)
        return dlc_scenario(self.speed_kmh, self.kind == "dlc-priority", self.geometry)


@dataclass(frozen=True)
class PlantConfig:
    """Surrogate-plant knobs, expressed relative to the nominal tyre.

    ``tyre = "nominal"`` gives a plant identical to the controller model.
    """

    tyre: str = "pacejka"
    mu_scale_f: float = 0.85
    mu_scale_r: float = 0.85
    stiffness_scale_f: float = 0.9
    stiffness_scale_r: float = 0.95
    shape_C: float = 1.6
    curvature_E: float = -0.5
    relax_length: float = 0.5
    steer_tau: float = 0.05
    combined_slip: bool = True
    substeps: int = 5
    noise: bool = True
    noise_fy: float = 50.0
    noise_r: float = 0.005

    def __post_init__(self):
        if self.tyre not in ("pacejka", "nominal"):
            raise ValueError(f"unknown plant tyre {self.tyre!r}")
        if min(self.mu_scale_f, self.mu_scale_r, self.stiffness_scale_f, self.stiffness_scale_r) <= 0:
            raise ValueError("plant scale factors must be positive")

    def noise_floors(self) -> dict:
        """Sensor noise per mismatch channel, used as the fitted-noise lower bound."""
        if not self.noise:
            return {}
        return {"dfyf": self.noise_fy, "dfyr": self.noise_fy, "dr": self.noise_r}

    def build(self, vp: VehicleParams, fp: FialaParams) -> PlantParams:
        nf = self.noise_fy if self.noise else 0.0
        nr = self.noise_r if self.noise else 0.0
        if self.tyre == "nominal":
            return PlantParams.nominal_equivalent(vp, fp, substeps=self.substeps, noise_fy=nf, noise_r=nr)
        pac = PacejkaParams(
            front=PacejkaAxle.matched(self.stiffness_scale_f * fp.C_alpha_f, self.mu_scale_f * vp.mu * fp.F_z_f,
                                      C=self.shape_C, E=self.curvature_E),
            rear=PacejkaAxle.matched(self.stiffness_scale_r * fp.C_alpha_r, self.mu_scale_r * vp.mu * fp.F_z_r,
                                     C=self.shape_C, E=self.curvature_E),
            relax_length=self.relax_length,
            steer_tau=self.steer_tau,
        )
        return PlantParams(pac, fp, "pacejka", self.combined_slip, self.substeps, nf, nr)


@dataclass(frozen=True)
class TyreConfig:
    C_alpha_f: float = 80e3
    C_alpha_r: float = 80e3

    def build(self, vp: VehicleParams) -> FialaParams:
        return FialaParams.from_vehicle(vp, self.C_alpha_f, self.C_alpha_r)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    tyre: TyreConfig = field(default_factory=TyreConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    controller: OCPConfig = field(default_factory=OCPConfig)
    variant: ControllerVariant = ControllerVariant.MPCC
    seed: int = 0
    timeout: float = 30.0
    models: str | None = None
    out: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "variant", ControllerVariant(self.variant))
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def with_speed(self, kmh: float) -> "RunConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, speed_kmh=float(kmh)))

    def with_scenario(self, kind: str, kmh: float | None = None) -> "RunConfig":
        sc = dataclasses.replace(self.scenario, kind=kind)
        if kmh is not None:
            sc = dataclasses.replace(sc, speed_kmh=float(kmh))
        return dataclasses.replace(self, scenario=sc)

    def with_variant(self, variant) -> "RunConfig":
        return dataclasses.replace(self, variant=ControllerVariant(variant))


def _section(cls, doc: dict, name: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = {}
    for k, v in doc.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {version}")
    sc_doc = dict(doc.pop("scenario", {}))
    geo_keys = {f.name for f in dataclasses.fields(DLCGeometry)}
    geo = {k: sc_doc.pop(k) for k in list(sc_doc) if k in geo_keys}
    kw = {}
    kw["scenario"] = ScenarioConfig(geometry=DLCGeometry(**_section(DLCGeometry, geo, "scenario")),
                                    **_section(ScenarioConfig, sc_doc, "scenario"))
    for key, cls in (("vehicle", VehicleParams), ("tyre", TyreConfig), ("plant", PlantConfig),
                     ("controller", OCPConfig)):
        kw[key] = cls(**_section(cls, doc.pop(key, {}), key))
    top = {"variant", "seed", "timeout", "models", "out"}
    unknown = set(doc) - top
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    kw.update(doc)
    return RunConfig(**kw)


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(obj):
        d = dataclasses.asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    sc = {"kind": cfg.scenario.kind, "speed_kmh": cfg.scenario.speed_kmh}
    sc.update(plain(cfg.scenario.geometry))
    doc = {"version": CONFIG_VERSION, "variant": cfg.variant.value, "seed": cfg.seed, "timeout": cfg.timeout,
           "out": cfg.out, "scenario": sc, "vehicle": plain(cfg.vehicle), "tyre": plain(cfg.tyre),
           "plant": plain(cfg.plant), "controller": plain(cfg.controller)}
    if cfg.models is not None:
        doc["models"] = cfg.models
    return doc


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomli.load(fh))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_bytes(tomli_w.dumps(config_to_dict(cfg)).encode())
