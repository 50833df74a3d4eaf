"""Merge plans: a strict JSON description of one merge run.

Example::

    {
      "base_path": "base.safetensors",
      "model_paths": ["helpful.safetensors", "honest.safetensors"],
      "method": "resm",
      "output_path": "merged.safetensors",
      "resm": {"gamma0": 0.2, "gamma": 0.6, "epsilon": 0.1}
    }

Relative paths are resolved against the directory holding the plan file.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .task_vector import ResmParams

__all__ = ["METHODS", "VECTOR_POLICIES", "MergePlan", "load_plan", "plan_from_dict", "plan_to_dict"]

METHODS = (
    "weight_average",
    "task_arithmetic",
    "ties",
    "dare",
    "dare_ties",
    "breadcrumbs",
    "breadcrumbs_ties",
    "tsvm",
    "resm",
)
VECTOR_POLICIES = ("base_passthrough", "uniform_ta", "alpha_ta")


@dataclass
class MergePlan:
    base_path: Path
    model_paths: list[Path]
    method: str
    output_path: Path
    weights: list[float] | None = None
    lam: float = 1.0
    density: float = 0.2
    drop_p: float = 0.5
    top_discard: float = 0.01
    bottom_discard: float = 0.15
    k_fixed: int | None = None
    resm: ResmParams = field(default_factory=ResmParams)
    vector_policy: str | None = None
    seed: int = 0
    threads: int | None = None
    passthrough_high_rank: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def effective_vector_policy(self) -> str:
        if self.vector_policy is not None:
            return self.vector_policy
        return "alpha_ta" if self.method == "resm" else "uniform_ta"

    def validate(self) -> None:
        def bad(msg: str):
            raise ConfigError(msg)

        if self.method not in METHODS:
            bad(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not self.model_paths:
            bad("model_paths must list at least one checkpoint")
        if self.weights is not None:
            if self.method != "weight_average":
                bad("weights are only used by method 'weight_average'")
            if len(self.weights) != len(self.model_paths):
                bad(f"{len(self.weights)} weights for {len(self.model_paths)} models")
        if not 0 < self.density <= 1:
            bad(f"density must lie in (0, 1], got {self.density}")
        if not 0 <= self.drop_p < 1:
            bad(f"drop_p must lie in [0, 1), got {self.drop_p}")
        if self.top_discard < 0 or self.bottom_discard < 0 or self.top_discard + self.bottom_discard >= 1:
            bad("need top_discard, bottom_discard >= 0 and top_discard + bottom_discard < 1")
        if self.k_fixed is not None and self.k_fixed < 1:
            bad("k_fixed must be a positive integer")
        if self.vector_policy is not None and self.vector_policy not in VECTOR_POLICIES:
            bad(f"unknown vector_policy {self.vector_policy!r}")
        if not 0 <= self.seed < 2**64:
            bad("seed must be a 64-bit unsigned integer")
        if self.threads is not None and self.threads < 1:
            bad("threads must be a positive integer")


_TYPES: dict[str, tuple[type, ...]] = {
    "base_path": (str,),
    "model_paths": (list,),
    "method": (str,),
    "output_path": (str,),
    "weights": (list, type(None)),
    "lambda": (int, float),
    "density": (int, float),
    "drop_p": (int, float),
    "top_discard": (int, float),
    "bottom_discard": (int, float),
    "k_fixed": (int, type(None)),
    "resm": (dict,),
    "vector_policy": (str, type(None)),
    "seed": (int,),
    "threads": (int, type(None)),
    "passthrough_high_rank": (bool,),
}
_REQUIRED = ("base_path", "model_paths", "method", "output_path")
_RESM_TYPES: dict[str, tuple[type, ...]] = {
    "gamma0": (int, float),
    "gamma": (int, float),
    "epsilon": (int, float),
    "sigma_mult": (int, float),
    "scale": (int, float),
    "rank_override": (int, type(None)),
    "invert_alpha": (bool,),
    "uniform_alpha": (bool,),
}


def _check_types(obj: Mapping[str, Any], types: Mapping[str, tuple], where: str) -> None:
    for key, value in obj.items():
        if key not in types:
            raise ConfigError(f"unknown key {where}{key!r}")
        allowed = types[key]
        # bool is an int subclass; only accept it where bool is listed
        if isinstance(value, bool) and bool not in allowed:
            raise ConfigError(f"{where}{key!r} has invalid type bool")
        if not isinstance(value, allowed):
            raise ConfigError(f"{where}{key!r} has invalid type {type(value).__name__}")


def plan_from_dict(raw: Mapping[str, Any], root: str | os.PathLike = ".") -> MergePlan:
    """Build a validated :class:`MergePlan` from parsed JSON."""
    if not isinstance(raw, Mapping):
        raise ConfigError("plan must be a JSON object")
    _check_types(raw, _TYPES, "")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    if not all(isinstance(p, str) for p in raw["model_paths"]):
        raise ConfigError("model_paths must be a list of strings")
    if raw.get("weights") is not None and not all(
        isinstance(w, (int, float)) and not isinstance(w, bool) for w in raw["weights"]
    ):
        raise ConfigError("weights must be a list of numbers")

    resm_raw = raw.get("resm", {})
    _check_types(resm_raw, _RESM_TYPES, "resm.")
    try:
        resm = ResmParams(**resm_raw)
    except ValueError as exc:
        raise ConfigError(f"resm: {exc}") from exc

    root = Path(root)
    kwargs = {
        k: raw[k]
        for k in _TYPES
        if k in raw and k not in ("lambda", "resm", "base_path", "model_paths", "output_path")
    }
    return MergePlan(
        base_path=root / raw["base_path"],
        model_paths=[root / p for p in raw["model_paths"]],
        output_path=root / raw["output_path"],
        lam=float(raw.get("lambda", 1.0)),
        resm=resm,
        **kwargs,
    )


def load_plan(path: str | os.PathLike) -> MergePlan:
    """Parse and validate a plan file. Raises :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan is not valid JSON: {exc}") from exc
    return plan_from_dict(raw, root=path.parent)


def plan_to_dict(plan: MergePlan) -> dict[str, Any]:
    out = {
        "base_path": str(plan.base_path),
        "model_paths": [str(p) for p in plan.model_paths],
        "method": plan.method,
        "output_path": str(plan.output_path),
        "weights": plan.weights,
        "lambda": plan.lam,
        "density": plan.density,
        "drop_p": plan.drop_p,
        "top_discard": plan.top_discard,
        "bottom_discard": plan.bottom_discard,
        "k_fixed": plan.k_fixed,
        "resm": dataclasses.asdict(plan.resm),
        "vector_policy": plan.vector_policy,
        "seed": plan.seed,
        "threads": plan.threads,
        "passthrough_high_rank": plan.passthrough_high_rank,
    }
    return out
