"""Versioned JSON run configuration shared by every CLI command."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .cohort import CohortSpec
from .errors import ConfigError, InvalidParameter, InvalidSpec
from .multivariate import GibbsConfig
from .occ import DEFAULT_ALPHA_GRID, ClassifierPolicy
from .pipeline import ModelSettings
from .profiles import RATIOS, ALL_MARKERS, resolve_markers
from .univariate import UnivariateConfig

CONFIG_VERSION = 1

TOP_LEVEL_KEYS = {"version", "cohort", "data", "policies", "univariate", "gibbs", "prior",
                  "alpha_grid", "n_rep", "update", "oversample", "svg", "thresholds"}


def default_policies() -> list[dict]:
    """Every single-marker univariate policy and the three multivariate subsets."""
    uni = [{"model": "univariate", "markers": [m.value]} for m in ALL_MARKERS]
    mv = [{"model": "multivariate", "markers": s} for s in ("EAAS_only", "ratios_only", "all")]
    return uni + mv


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "cohort": {},
        "data": None,
        "policies": default_policies(),
        "univariate": {},
        "gibbs": {},
        "prior": {},
        "alpha_grid": list(DEFAULT_ALPHA_GRID),
        "n_rep": None,
        "update": "athlete",
        "oversample": True,
        "svg": False,
        "thresholds": None,
    }


@dataclass(frozen=True)
class RunConfig:
    raw: Mapping[str, Any]
    cohort: CohortSpec
    policies: tuple[ClassifierPolicy, ...]
    settings: ModelSettings
    data: str | None
    oversample: bool
    svg: bool
    thresholds: Mapping | None = None
    seed: int = 0

    @property
    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical.encode()).hexdigest()

    def provenance(self) -> str:
        return f"config_sha256={self.sha256} seed={self.seed}"

    def resolved_json(self) -> str:
        return json.dumps({"config_sha256": self.sha256, "seed": self.seed, "config": self.raw},
                          indent=2, sort_keys=True) + "\n"


def _section(raw: Mapping, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(key, "must be an object")
    return dict(value)


def _build(key: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise ConfigError(key, f"unknown or malformed field ({exc})") from None
    except (InvalidParameter, InvalidSpec, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _policy(i: int, d: Any, alpha_grid: tuple[float, ...]) -> ClassifierPolicy:
    key = f"policies[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(key, "must be an object")
    d = dict(d)
    unknown = set(d) - {"model", "markers", "rule", "alpha_level", "exclude_flagged"}
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown policy field")
    markers = d.get("markers", "all")
    try:
        markers = markers if isinstance(markers, str) and markers in ("EAAS_only", "ratios_only", "all") \
            else resolve_markers(markers)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{key}.markers", str(exc)) from None
    d["markers"] = markers
    return _build(key, ClassifierPolicy, {**d, "alpha_grid": alpha_grid})


def resolve_config(raw_user: Mapping | None, seed: int = 0) -> RunConfig:
    """Merge user settings over the defaults and validate every section."""
    raw = default_config()
    user = dict(raw_user or {})
    unknown = set(user) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    if "version" in user and user["version"] != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {user['version']!r}, expected {CONFIG_VERSION}")
    raw.update(user)

    cohort_kw = _section(raw, "cohort")
    try:
        cohort = CohortSpec.from_dict({**cohort_kw, "seed": seed})
    except InvalidSpec as exc:
        raise ConfigError("cohort", str(exc)) from None

    grid = raw["alpha_grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(a, (int, float)) and 0 < a < 1 for a in grid):
        raise ConfigError("alpha_grid", "must be a non-empty list of levels in (0, 1)")
    grid = tuple(float(a) for a in grid)

    if not isinstance(raw["policies"], list) or not raw["policies"]:
        raise ConfigError("policies", "must be a non-empty list")
    policies = tuple(_policy(i, p, grid) for i, p in enumerate(raw["policies"]))
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError("policies", "duplicate policy")

    uni = _build("univariate", UnivariateConfig, _section(raw, "univariate"))
    gibbs = _build("gibbs", GibbsConfig, {**_section(raw, "gibbs"), "seed": seed})
    prior = _section(raw, "prior")
    unknown = set(prior) - {"scale", "df", "scale_convention"}
    if unknown:
        raise ConfigError(f"prior.{sorted(unknown)[0]}", "unknown prior field")
    n_rep = raw["n_rep"]
    if n_rep is not None and (not isinstance(n_rep, int) or n_rep < 1000):
        raise ConfigError("n_rep", "must be null or an integer >= 1000")
    if raw["update"] not in ("athlete", "full"):
        raise ConfigError("update", "must be 'athlete' or 'full'")
    settings = _build("prior", ModelSettings, dict(
        univariate=uni, gibbs=gibbs, prior_scale=float(prior.get("scale", 1e-3)),
        prior_df=prior.get("df"), scale_convention=prior.get("scale_convention", "default"),
        n_rep=n_rep, update=raw["update"]))
    if raw["data"] is not None and not isinstance(raw["data"], str):
        raise ConfigError("data", "must be a path string or null")
    for key in ("oversample", "svg"):
        if not isinstance(raw[key], bool):
            raise ConfigError(key, "must be true or false")
    if raw["thresholds"] is not None and not isinstance(raw["thresholds"], dict):
        raise ConfigError("thresholds", "must be an object or null")
    return RunConfig(raw, cohort, policies, settings, raw["data"], raw["oversample"], raw["svg"],
                     raw["thresholds"], seed)


def load_config(path: str | Path | None, seed: int = 0) -> RunConfig:
    if path is None:
        return resolve_config({}, seed)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError("--config", "top level must be an object")
    return resolve_config(user, seed)
