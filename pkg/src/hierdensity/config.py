"""Run configuration for the command-line harness.

A configuration is a JSON object with a ``schema_version`` field and four
sections::

    {
      "schema_version": 1,
      "model":      {"topology": "chain", "shape": [16], "coupling": "ferro",
                     "beta": 0.6},
      "estimator":  {"t": 4, "locality_radius": 2, "leaf_size": 4,
                     "ranks": [2, 16], "rank_tol": 1e-10, "pinv_tol": 1e-12,
                     "restrict_cluster_side": true, "distance": "model",
                     "max_width": 4096},
      "experiment": {"N": [4000, 8000], "seeds": [0, 1], "repetitions": 1,
                     "betas": null, "sampler": "auto", "burn_in": 10000,
                     "thin": 10, "sweep_ranks": [1, 2, 4], "sweep_level": 1},
      "output":     {"dir": "out", "timing": true}
    }

``estimator.ranks`` is one rank per tree level below the root (``null``
selects ranks by ``rank_tol``). ``experiment.betas`` defaults to
``[model.beta]``. ``distance`` is ``"model"`` (lattice distance of the
model) or ``"index"`` (``|i - j|``). Missing keys take the defaults above.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .estimator import RankSchedule
from .models import IsingSpec
from .sketch import SketchConfig
from .tree import DimensionTree

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "model": {"topology": "chain", "shape": [16], "coupling": "ferro", "beta": 0.6},
    "estimator": {"t": 4, "locality_radius": 2, "leaf_size": 4, "ranks": [2, 16],
                  "rank_tol": 1e-10, "pinv_tol": 1e-12, "restrict_cluster_side": True,
                  "distance": "model", "max_width": 4096},
    "experiment": {"N": [4000, 8000, 16000, 32000, 64000], "seeds": [0, 1, 2, 3, 4],
                   "repetitions": 1, "betas": None, "sampler": "auto", "burn_in": 10000,
                   "thin": 10, "sweep_ranks": [1, 2, 4, 6, 8, 10, 12, 16], "sweep_level": 1},
    "output": {"dir": "out", "timing": True},
}

_SAMPLERS = ("auto", "exact", "gibbs")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} "
                              f"(this build reads {SCHEMA_VERSION})")
        return cls(_merge(DEFAULTS, data))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        data = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            parts = key.strip().split(".")
            node = data
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node or isinstance(node[parts[-1]], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = _parse_value(raw)
        return RunConfig(data)

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.to_dict()
        data["experiment"]["seeds"] = [int(seed)]
        return RunConfig(data)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        d = self.data
        try:
            spec = self.model
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None
        est, exp = d["estimator"], d["experiment"]
        for key in ("t", "leaf_size", "max_width"):
            if not isinstance(est[key], int) or est[key] < 1:
                raise ConfigError(f"estimator.{key} must be a positive integer, got {est[key]!r}")
        if not isinstance(est["locality_radius"], int) or est["locality_radius"] < 0:
            raise ConfigError("estimator.locality_radius must be a non-negative integer")
        if est["distance"] not in ("model", "index"):
            raise ConfigError("estimator.distance must be 'model' or 'index'")
        for key in ("rank_tol", "pinv_tol"):
            if not isinstance(est[key], (int, float)) or not 0 < est[key] < 1:
                raise ConfigError(f"estimator.{key} must lie in (0, 1), got {est[key]!r}")
        try:
            tree = self.tree
        except ValueError as exc:
            raise ConfigError(f"tree: {exc}") from None
        ranks = est["ranks"]
        if ranks is not None:
            if (not isinstance(ranks, list) or len(ranks) != tree.L
                    or not all(isinstance(r, int) and r >= 1 for r in ranks)):
                raise ConfigError(f"estimator.ranks must be null or {tree.L} positive "
                                  f"integers (one per level), got {ranks!r}")
        for key in ("N", "seeds", "sweep_ranks"):
            vals = exp[key]
            if not isinstance(vals, list) or not vals or not all(isinstance(v, int) for v in vals):
                raise ConfigError(f"experiment.{key} must be a non-empty list of integers")
        if any(v < 1 for v in exp["N"]) or any(v < 1 for v in exp["sweep_ranks"]):
            raise ConfigError("experiment.N and experiment.sweep_ranks entries must be >= 1")
        if any(v < 0 for v in exp["seeds"]):
            raise ConfigError("experiment.seeds must be non-negative")
        if not isinstance(exp["repetitions"], int) or exp["repetitions"] < 1:
            raise ConfigError("experiment.repetitions must be a positive integer")
        if exp["betas"] is not None:
            if not isinstance(exp["betas"], list) or not exp["betas"] or \
                    not all(isinstance(b, (int, float)) and b >= 0 for b in exp["betas"]):
                raise ConfigError("experiment.betas must be null or a list of non-negative numbers")
        if exp["sampler"] not in _SAMPLERS:
            raise ConfigError(f"experiment.sampler must be one of {_SAMPLERS}")
        for key in ("burn_in", "thin"):
            if not isinstance(exp[key], int) or exp[key] < 1:
                raise ConfigError(f"experiment.{key} must be a positive integer")
        if not isinstance(exp["sweep_level"], int) or not 1 <= exp["sweep_level"] <= tree.L:
            raise ConfigError(f"experiment.sweep_level must lie in 1..{tree.L}")
        if not isinstance(d["output"]["dir"], str):
            raise ConfigError("output.dir must be a string")
        if spec.d != tree.d:
            raise ConfigError("model and tree disagree on d")

    # -- derived objects ---------------------------------------------------

    @property
    def model(self) -> IsingSpec:
        m = self.data["model"]
        return IsingSpec(m["topology"], tuple(m["shape"]), m["coupling"], float(m["beta"]))

    @property
    def betas(self) -> list[float]:
        b = self.data["experiment"]["betas"]
        return [float(x) for x in b] if b is not None else [float(self.data["model"]["beta"])]

    @property
    def tree(self) -> DimensionTree:
        return DimensionTree(self.model.d, 2, self.data["estimator"]["leaf_size"])

    def sketch_config(self, spec: IsingSpec | None = None) -> SketchConfig:
        est = self.data["estimator"]
        spec = spec or self.model
        dist = spec.site_distance() if est["distance"] == "model" else None
        return SketchConfig(t=est["t"], locality_radius=est["locality_radius"],
                            restrict_cluster_side=bool(est["restrict_cluster_side"]),
                            max_width=est["max_width"], distance=dist)

    @property
    def ranks(self) -> RankSchedule:
        est = self.data["estimator"]
        r = est["ranks"]
        return RankSchedule(tuple(r) if r is not None else None, float(est["rank_tol"]))

    @property
    def pinv_tol(self) -> float:
        return float(self.data["estimator"]["pinv_tol"])

    @property
    def experiment(self) -> dict:
        return self.data["experiment"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output"]["dir"])

    @property
    def timing(self) -> bool:
        return bool(self.data["output"]["timing"])

    def hash(self) -> str:
        """Short digest of everything that affects results (not output settings)."""
        body = {k: v for k, v in self.data.items() if k != "output"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def stream_seed(seed: int, rep: int):
    """RNG seed for repetition ``rep`` of ``seed``; repetition 0 is ``seed`` itself."""
    return int(seed) if rep == 0 else np.random.SeedSequence([int(seed), int(rep)])
