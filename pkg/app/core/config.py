"""
Run configuration: a YAML (or JSON) key tree, validated before any computation.

Top-level sections: seed, threads, data, model, fit, curve, bootstrap, simulate, study.
Unknown keys anywhere raise ConfigError naming the dotted key path.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import yaml

from app.core.csv_utils import CsvSchema
from app.core.dataset import ItemType, LGPError
from app.core.fit import FitOptions
from app.core.kernels import BasisLowRank, Exponential, Periodic, SquaredExponential
from app.core.mean_basis import (
    BasisSet,
    ConstantBasis,
    CubicSplineBasis,
    MeanSpec,
    PolynomialBasis,
    quantile_knots,
)
from app.core.measurement import LinearFactorItem, MeasurementSpec, ProbitItem
from app.core.model import ConstraintSet, ModelSpec
from app.core.posterior import CurveOptions
from app.core.simulate import SimConfig
from app.utils import DEFAULT_SEED

logger = logging.getLogger(__name__)

DEFAULT_THREADS = -1


class ConfigError(LGPError, ValueError):
    pass


SCHEMA = {
    "seed": None,
    "threads": None,
    "data": {"path", "layout", "id_column", "time_column", "response_columns", "group_column", "groups",
             "time_horizon", "item_column", "value_column"},
    "model": {"mean", "kernel", "items", "constraints", "groups", "horizon"},
    "fit": {"method", "max_iter", "tol", "m0", "m", "sweeps", "start", "random_init", "progress"},
    "curve": {"alphas", "samples", "burn_in", "grid_points", "ids", "group", "force_mc"},
    "bootstrap": {"replicates", "fitter", "level", "contrasts"},
    "simulate": {"N", "days", "per_day", "group_mix", "grid_points"},
    "study": {"replications", "score_curves"},
}
BASIS_KEYS = {"type", "degree", "knots", "n_knots"}
MEAN_KEYS = BASIS_KEYS | {"coefficients"}
KERNEL_KEYS = {"type", "c", "c2", "kappa", "period", "weights", "basis"}
ITEM_KEYS = {"type", "a", "b", "sigma2", "thresholds", "levels"}
CONSTRAINT_KEYS = {"scale", "location"}

KERNELS = {"se": SquaredExponential, "exponential": Exponential, "periodic": Periodic}


def _check_keys(entry, allowed, path):
    if not isinstance(entry, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(entry).__name__}")
    unknown = sorted(set(entry) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {path + '.' if path else ''}{unknown[0]}")


def _check_component(entry, allowed, path):
    if isinstance(entry, dict) and "by_group" in entry:
        _check_keys(entry, {"by_group"}, path)
        _check_keys(entry["by_group"], set(entry["by_group"]), f"{path}.by_group")
        for label, sub in entry["by_group"].items():
            _check_keys(sub, allowed, f"{path}.by_group.{label}")
        return
    _check_keys(entry, allowed, path)


def validate(raw: dict):
    _check_keys(raw, SCHEMA, "")
    for section, allowed in SCHEMA.items():
        if section not in raw or allowed is None:
            continue
        _check_keys(raw[section], allowed, section)
    model = raw.get("model", {})
    if "mean" in model:
        _check_component(model["mean"], MEAN_KEYS, "model.mean")
    if "kernel" in model:
        _check_component(model["kernel"], KERNEL_KEYS, "model.kernel")
        entries = model["kernel"].get("by_group", {"": model["kernel"]})
        for label, entry in entries.items():
            where = "model.kernel" + (f".by_group.{label}" if label else "")
            kind = entry.get("type", "se")
            if kind not in (*KERNELS, "basis"):
                raise ConfigError(f"{where}.type: unknown kernel {kind!r}; choose from {[*KERNELS, 'basis']}")
            if "basis" in entry:
                _check_keys(entry["basis"], BASIS_KEYS, f"{where}.basis")
    for j, item in enumerate(model.get("items", []) or []):
        _check_keys(item, ITEM_KEYS, f"model.items.{j}")
        if item.get("type", "linear") not in ("linear", "probit"):
            raise ConfigError(f"model.items.{j}.type: unknown item type {item.get('type')!r}")
    if "constraints" in model:
        _check_keys(model["constraints"], CONSTRAINT_KEYS, "model.constraints")
    contrasts = raw.get("bootstrap", {}).get("contrasts", {}) or {}
    for label, pair in contrasts.items():
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ConfigError(f"bootstrap.contrasts.{label}: expected [parameter_a, parameter_b]")


# --- model components ---------------------------------------------------------------------

def _basis(entry, horizon, path, times=None) -> BasisSet:
    kind = entry.get("type", "constant")
    if kind == "constant":
        return ConstantBasis(horizon)
    if kind == "polynomial":
        return PolynomialBasis(horizon, int(entry.get("degree", 1)))
    if kind == "cubic_spline":
        if "knots" in entry:
            return CubicSplineBasis(horizon, tuple(entry["knots"]))
        n_knots = int(entry.get("n_knots", 3))
        if times is not None:
            return CubicSplineBasis(horizon, quantile_knots(times, n_knots, horizon))
        return CubicSplineBasis(horizon, tuple(horizon * np.arange(1, n_knots + 1) / (n_knots + 1)))
    raise ConfigError(f"{path}.type: unknown mean basis {kind!r}")


def _mean(entry, horizon, path, times=None) -> MeanSpec:
    basis = _basis(entry, horizon, path, times)
    coefficients = entry.get("coefficients", [0.0] * (basis.dim + 1))
    return MeanSpec(basis, tuple(np.atleast_1d(coefficients)))


def _kernel(entry, horizon, path, times=None):
    kind = entry.get("type", "se")
    if kind == "basis":
        basis = _basis(entry.get("basis", {"type": "polynomial", "degree": 1}), horizon, f"{path}.basis", times)
        weights = entry.get("weights", [1.0] * (basis.dim + 1))
        return BasisLowRank(tuple(weights), basis)
    if "c" in entry and "c2" in entry:
        raise ConfigError(f"{path}: give either c or c2, not both")
    c = float(np.sqrt(entry["c2"])) if "c2" in entry else float(entry.get("c", 1.0))
    kappa = float(entry.get("kappa", 1.0))
    if kind == "periodic":
        return Periodic(c, kappa, float(entry.get("period", 1.0)))
    return KERNELS[kind](c, kappa)


def _item(entry, path):
    kind = entry.get("type", "linear")
    if kind == "linear":
        return LinearFactorItem(entry.get("a", 1.0), entry.get("b", 0.0), entry.get("sigma2", 1.0))
    if "thresholds" in entry:
        thresholds = tuple(entry["thresholds"])
    else:
        levels = int(entry.get("levels", 2))
        if levels < 2:
            raise ConfigError(f"{path}.levels: an ordinal item needs at least 2 categories")
        thresholds = tuple(np.linspace(-1.0, 1.0, levels - 1)) if levels > 2 else (0.0,)
    return ProbitItem(entry.get("a", 1.0), thresholds)


def _component(entry, groups, path, build):
    if isinstance(entry, dict) and "by_group" in entry:
        by_group = {str(k): v for k, v in entry["by_group"].items()}
        if set(by_group) != set(groups):
            raise ConfigError(f"{path}.by_group must cover exactly the model groups {list(groups)}")
        return tuple(build(by_group[g], f"{path}.by_group.{g}") for g in groups)
    return (build(entry, path),)


def item_types_from(model_cfg) -> tuple:
    types = []
    for j, entry in enumerate(model_cfg.get("items", []) or []):
        item = _item(entry, f"model.items.{j}")
        types.append(ItemType.ordinal(item.n_levels) if isinstance(item, ProbitItem) else ItemType.continuous())
    return tuple(types)


def build_model(model_cfg: dict, horizon: float, times=None) -> ModelSpec:
    """ModelSpec from the `model` section; `times` (pooled observation times) places quantile knots."""
    try:
        groups = tuple(str(g) for g in model_cfg.get("groups", []) or [])
        horizon = float(model_cfg.get("horizon", horizon))
        means = _component(model_cfg.get("mean", {}), groups, "model.mean",
                           lambda e, p: _mean(e, horizon, p, times))
        kernels = _component(model_cfg.get("kernel", {}), groups, "model.kernel",
                             lambda e, p: _kernel(e, horizon, p, times))
        entries = model_cfg.get("items", []) or []
        if not entries:
            raise ConfigError("model.items: at least one item is required")
        items = tuple(_item(e, f"model.items.{j}") for j, e in enumerate(entries))
        constraints = ConstraintSet(**(model_cfg.get("constraints") or {}))
        return ModelSpec(means, kernels, MeasurementSpec(items), constraints, groups)
    except ConfigError:
        raise
    except (LGPError, TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from e


def _basis_to_dict(basis: BasisSet) -> dict:
    if isinstance(basis, PolynomialBasis):
        return {"type": "polynomial", "degree": basis.degree}
    if isinstance(basis, CubicSplineBasis):
        return {"type": "cubic_spline", "knots": list(basis.knots)}
    return {"type": "constant"}


def _kernel_to_dict(kernel) -> dict:
    if isinstance(kernel, BasisLowRank):
        return {"type": "basis", "weights": list(kernel.weights), "basis": _basis_to_dict(kernel.basis)}
    kind = {SquaredExponential: "se", Exponential: "exponential", Periodic: "periodic"}[type(kernel)]
    entry = {"type": kind, "c": kernel.c, "kappa": kernel.kappa}
    if isinstance(kernel, Periodic):
        entry["period"] = kernel.period
    return entry


def _item_to_dict(item) -> dict:
    if isinstance(item, ProbitItem):
        return {"type": "probit", "a": item.a, "thresholds": list(item.thresholds)}
    return {"type": "linear", "a": item.a, "b": item.b, "sigma2": item.sigma2}


def model_to_dict(model: ModelSpec) -> dict:
    """Inverse of build_model (knots are written out explicitly)."""
    def component(parts, to_dict):
        if len(parts) == 1:
            return to_dict(parts[0])
        return {"by_group": {g: to_dict(p) for g, p in zip(model.groups, parts)}}

    def mean_to_dict(mean):
        return {**_basis_to_dict(mean.basis), "coefficients": list(mean.coefficients)}

    return {
        "horizon": model.mean.basis.horizon,
        "groups": list(model.groups),
        "mean": component(model.means, mean_to_dict),
        "kernel": component(model.kernels, _kernel_to_dict),
        "items": [_item_to_dict(item) for item in model.measurement.items],
        "constraints": {"scale": model.constraints.scale, "location": model.constraints.location},
    }


# --- run config --------------------------------------------------------------------------------

def _set_dotted(raw, dotted, value):
    node = raw
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


@dataclass(frozen=True, eq=False)
class RunConfig:
    raw: Dict[str, Any]

    @classmethod
    def from_dict(cls, raw: Optional[dict]):
        raw = copy.deepcopy(raw or {})
        validate(raw)
        return cls(raw)

    def section(self, name) -> dict:
        return self.raw.get(name) or {}

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", DEFAULT_SEED))

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", DEFAULT_THREADS))

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied; None values are skipped."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in overrides.items():
            if value is not None:
                _set_dotted(raw, dotted, value)
        return RunConfig.from_dict(raw)

    def dump(self) -> str:
        merged = copy.deepcopy(self.raw)
        merged.setdefault("seed", self.seed)
        merged.setdefault("threads", self.threads)
        return yaml.safe_dump(merged, sort_keys=True, allow_unicode=True)

    def item_types(self):
        types = item_types_from(self.section("model"))
        if not types:
            raise ConfigError("model.items: at least one item is required")
        return types

    def model(self, horizon, times=None) -> ModelSpec:
        return build_model(self.section("model"), horizon, times)

    def csv_schema(self) -> CsvSchema:
        data = self.section("data")
        groups = tuple(str(g) for g in (data.get("groups") or self.section("model").get("groups") or []))
        if self.section("model").get("groups") and not data.get("group_column"):
            raise ConfigError("data.group_column is required for a grouped model")
        try:
            return CsvSchema(
                item_types=self.item_types(),
                id_column=data.get("id_column", "id"),
                time_column=data.get("time_column", "time"),
                response_columns=tuple(data.get("response_columns") or ()),
                group_column=data.get("group_column"),
                layout=data.get("layout", "wide"),
                item_column=data.get("item_column", "item"),
                value_column=data.get("value_column", "value"),
                groups=groups,
                time_horizon=data.get("time_horizon"),
            )
        except LGPError as e:
            raise ConfigError(f"data: {e}") from e

    def fit_options(self) -> FitOptions:
        section = self.section("fit")
        try:
            return FitOptions(
                method=section.get("method", "auto"),
                max_iter=int(section.get("max_iter", 500)),
                tol=float(section.get("tol", 1e-6)),
                m0=int(section.get("m0", 100)),
                m=int(section.get("m", 200)),
                sweeps=int(section.get("sweeps", 5)),
                seed=self.seed,
                n_jobs=self.threads,
                start=section.get("start", "data"),
                random_init=bool(section.get("random_init", False)),
                progress=bool(section.get("progress", False)),
            )
        except LGPError as e:
            raise ConfigError(f"fit: {e}") from e

    def curve_options(self) -> CurveOptions:
        section = self.section("curve")
        alphas = tuple(float(a) for a in section.get("alphas", (0.025, 0.975)))
        return CurveOptions(
            alphas=alphas,
            samples=int(section.get("samples", 100)),
            burn_in=int(section.get("burn_in", 100)),
            grid_points=int(section.get("grid_points", 200)),
            force_mc=bool(section.get("force_mc", False)),
        )

    def sim_config(self) -> SimConfig:
        section = self.section("simulate")
        days = int(section.get("days", 25))
        per_day = section.get("per_day", 4)
        per_day = tuple(per_day) if isinstance(per_day, list) else int(per_day)
        try:
            return SimConfig(
                N=int(section.get("N", 100)),
                days=days,
                per_day=per_day,
                model=self.model(float(days)),
                seed=self.seed,
                group_mix=section.get("group_mix"),
                grid_points=int(section.get("grid_points", 200)),
            )
        except ConfigError:
            raise
        except LGPError as e:
            raise ConfigError(f"simulate: {e}") from e

    def contrasts(self):
        pairs = self.section("bootstrap").get("contrasts") or {}
        return {label: (pair[0], pair[1]) for label, pair in pairs.items()}


def load_config(path) -> RunConfig:
    """Read and validate a config file; a missing path gives the all-defaults config."""
    if path is None:
        return RunConfig.from_dict({})
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)
