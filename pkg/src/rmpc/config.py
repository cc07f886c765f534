"""JSON configuration: schema validation and conversion to library objects."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from rmpc.errors import ConfigError
from rmpc.model import UncertainSystem
from rmpc.mpc import MPCOptions
from rmpc.polytope import HPolytope


def schema() -> dict:
    return json.loads(resources.files("rmpc.data").joinpath("config.schema.json").read_text("utf-8"))


def example_path():
    return resources.files("rmpc.data").joinpath("example.json")


@dataclass
class BoundsConfig:
    method: str = "exact"
    N_cut: int | None = None
    p: str = "inf"


@dataclass
class SimConfig:
    T: int = 50
    runs: int = 500
    n_initial: int = 20
    seed: int = 0
    x0: list | None = None
    realizations: list = field(default_factory=lambda: ["vertex", "hull", "varying", "nominal"])
    disturbances: list = field(default_factory=lambda: ["uniform", "vertex", "adversarial", "zero"])


@dataclass
class Config:
    system: UncertainSystem
    K: np.ndarray
    terminal_max_iter: int = 100
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    mpc: MPCOptions = field(default_factory=MPCOptions)
    sim: SimConfig = field(default_factory=SimConfig)
    n_dirs: int = 36
    raw: dict = field(default_factory=dict, repr=False)

    def digest(self) -> str:
        """Hash of the data that determines the offline artifacts."""
        keys = ("system", "cost", "N", "K", "terminal", "bounds")
        blob = json.dumps({k: self.raw.get(k) for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _poly(d: dict) -> HPolytope:
    return HPolytope(np.asarray(d["H"], dtype=float), np.asarray(d["h"], dtype=float))


def from_dict(raw: dict) -> Config:
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from None
    s = raw["system"]
    for name in ("A_bar", "B_bar"):
        if len({len(r) for r in s[name]}) != 1:
            raise ConfigError(f"{name} is not rectangular")
    try:
        system = UncertainSystem(
            A_bar=np.asarray(s["A_bar"], dtype=float),
            B_bar=np.asarray(s["B_bar"], dtype=float),
            deltaA_vertices=[np.asarray(v, dtype=float) for v in s["deltaA_vertices"]],
            deltaB_vertices=[np.asarray(v, dtype=float) for v in s["deltaB_vertices"]],
            W=_poly(s["W"]),
            X=_poly(s["X"]),
            U=_poly(s["U"]),
            P=np.asarray(raw["cost"]["P"], dtype=float),
            R=np.asarray(raw["cost"]["R"], dtype=float),
            N=raw["N"],
        )
        K = np.asarray(raw["K"], dtype=float)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if K.shape != (system.m, system.d):
        raise ConfigError(f"K has shape {K.shape}, expected {(system.m, system.d)}")
    b = BoundsConfig(**raw.get("bounds", {}))
    if b.N_cut is not None and b.N_cut > system.N:
        raise ConfigError("bounds.N_cut exceeds N")
    sim = SimConfig(**raw.get("sim", {}))
    if sim.x0 is not None and any(len(x) != system.d for x in sim.x0):
        raise ConfigError("sim.x0 entries have the wrong dimension")
    return Config(
        system=system,
        K=K,
        terminal_max_iter=raw.get("terminal", {}).get("max_iter", 100),
        bounds=b,
        mpc=MPCOptions(**raw.get("mpc", {})),
        sim=sim,
        n_dirs=raw.get("roa", {}).get("n_dirs", 36),
        raw=raw,
    )


def load(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(raw)


def load_example() -> Config:
    return from_dict(json.loads(example_path().read_text("utf-8")))
