"""
Model specification Psi and the map between a constrained model and the optimiser's free vector.

Free-vector layout, component by component:
    mean    scaled coefficients alpha_d * T^d (intercept first)
    kernel  kernel.free_params() (log c, log kappa, ... or omega_h)
    item    item.free_params() (a, b, log sigma2 or a, b_1, log gaps)
Entries fixed by the identifiability constraints are omitted.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from app.core.dataset import Dataset, LGPError
from app.core.kernels import BasisLowRank, KernelSpec
from app.core.mean_basis import MeanSpec
from app.core.measurement import LinearFactorItem, MeasurementSpec, ProbitItem

logger = logging.getLogger(__name__)

FREE_BOUND = 30.0
FIXED_TOLERANCE = 1e-12


class ConstraintError(LGPError, ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    """One scale fix and one location fix, both applied to the reference (first) group."""
    scale: str = "kernel_scale"
    location: str = "intercept_zero"

    SCALES = ("kernel_scale", "first_loading")
    LOCATIONS = ("intercept_zero", "first_item_location")

    def __post_init__(self):
        if self.scale not in self.SCALES:
            raise ConstraintError(f"scale constraint must be one of {self.SCALES}, got {self.scale!r}")
        if self.location not in self.LOCATIONS:
            raise ConstraintError(f"location constraint must be one of {self.LOCATIONS}, got {self.location!r}")


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


@dataclass(frozen=True)
class ModelSpec:
    """
    Psi. `means` and `kernels` hold one entry when shared by all individuals, or one entry per
    label in `groups` when group-specific. Measurement parameters are always shared.
    """
    means: Tuple[MeanSpec, ...]
    kernels: Tuple[KernelSpec, ...]
    measurement: MeasurementSpec
    constraints: ConstraintSet = ConstraintSet()
    groups: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "means", _as_tuple(self.means))
        object.__setattr__(self, "kernels", _as_tuple(self.kernels))
        object.__setattr__(self, "groups", tuple(str(g) for g in self.groups))
        for label, parts in (("mean", self.means), ("kernel", self.kernels)):
            if len(parts) != 1 and len(parts) != len(self.groups):
                raise ConstraintError(
                    f"{label} must be shared or given for each of {len(self.groups)} groups, got {len(parts)}"
                )
        if self.constraints.scale == "first_loading" and self.measurement.items[0].a == 0.0:
            raise ConstraintError("first_loading needs a non-zero first loading")

    @classmethod
    def single(cls, mean, kernel, measurement, constraints=ConstraintSet()):
        return cls((mean,), (kernel,), measurement, constraints)

    @property
    def is_grouped(self):
        return bool(self.groups) and (len(self.means) > 1 or len(self.kernels) > 1)

    @property
    def mean(self) -> MeanSpec:
        return self.means[0]

    @property
    def kernel(self) -> KernelSpec:
        return self.kernels[0]

    def group_index(self, group: Optional[str]) -> int:
        if not self.groups or group is None:
            return 0
        try:
            return self.groups.index(group)
        except ValueError:
            raise ConstraintError(f"model has no group {group!r}; known groups {list(self.groups)}") from None

    def mean_for(self, group=None) -> MeanSpec:
        return self.means[min(self.group_index(group), len(self.means) - 1)]

    def kernel_for(self, group=None) -> KernelSpec:
        return self.kernels[min(self.group_index(group), len(self.kernels) - 1)]

    def with_components(self, means=None, kernels=None, measurement=None):
        return replace(
            self,
            means=self.means if means is None else tuple(means),
            kernels=self.kernels if kernels is None else tuple(kernels),
            measurement=self.measurement if measurement is None else measurement,
        )

    def shared(self):
        """Ungrouped copy using the reference group's components."""
        return ModelSpec((self.means[0],), (self.kernels[0],), self.measurement, self.constraints)


def _suffix(model, parts, g):
    return f"[{model.groups[g]}]" if len(parts) > 1 else ""


def parameter_table(model: ModelSpec) -> Dict[str, float]:
    """Natural parameters by reported name, including the derived kernel variance c2."""
    table = {}
    for g, mean in enumerate(model.means):
        suffix = _suffix(model, model.means, g)
        for name, value in zip(mean.names, mean.coefficients):
            table[name + suffix] = float(value)
    for g, kernel in enumerate(model.kernels):
        suffix = _suffix(model, model.kernels, g)
        for name, value in zip(kernel.names, kernel.natural()):
            table[name + suffix] = float(value)
            if name == "c":
                table["c2" + suffix] = float(value) ** 2
    for j, item in enumerate(model.measurement.items, start=1):
        for name, value in zip(item.names(j), item.natural()):
            table[name] = float(value)
    return table


@dataclass(frozen=True)
class Block:
    kind: str
    index: int
    size: int
    start: int
    stop: int
    fixed: Tuple[Tuple[int, float], ...]

    @property
    def free_positions(self):
        fixed = {k for k, _ in self.fixed}
        return [k for k in range(self.size) if k not in fixed]


class ParameterMap:
    """Bijection between models sharing `template`'s structure and unconstrained free vectors."""

    def __init__(self, template: ModelSpec):
        self.template = template
        self.blocks: List[Block] = []
        constraints = template.constraints
        start = 0
        for kind, parts in (("mean", template.means), ("kernel", template.kernels),
                            ("item", template.measurement.items)):
            for index, part in enumerate(parts):
                fixed = self._fixed_entries(kind, index, part, constraints)
                size = len(self._component_free(kind, part))
                stop = start + size - len(fixed)
                self.blocks.append(Block(kind, index, size, start, stop, fixed))
                start = stop
        self.size = start

    @staticmethod
    def _fixed_entries(kind, index, part, constraints):
        if index != 0:
            return ()
        if kind == "mean" and constraints.location == "intercept_zero":
            return ((0, 0.0),)
        if kind == "kernel" and constraints.scale == "kernel_scale":
            return ((0, 1.0),) if isinstance(part, BasisLowRank) else ((0, 0.0),)
        if kind == "item":
            fixed = []
            if constraints.scale == "first_loading":
                fixed.append((0, 1.0))
            if constraints.location == "first_item_location":
                fixed.append((1, 0.0))
            return tuple(fixed)
        return ()

    @staticmethod
    def _component_free(kind, part):
        if kind == "mean":
            return part.scaled_coefficients()
        return np.asarray(part.free_params(), dtype=float)

    @staticmethod
    def _component_from_free(kind, part, values):
        if kind == "mean":
            return part.with_scaled_coefficients(values)
        return part.with_free_params(values)

    def _parts(self, model, kind):
        if kind == "mean":
            return model.means
        if kind == "kernel":
            return model.kernels
        return model.measurement.items

    def block(self, kind, index=0) -> Block:
        for block in self.blocks:
            if block.kind == kind and block.index == index:
                return block
        raise KeyError((kind, index))

    def free_names(self) -> List[str]:
        names = []
        for block in self.blocks:
            part = self._parts(self.template, block.kind)[block.index]
            if block.kind == "mean":
                labels = part.names
            elif block.kind == "kernel":
                labels = ("log " + n if not isinstance(part, BasisLowRank) else n for n in part.names)
                labels = tuple(labels)
            elif isinstance(part, LinearFactorItem):
                j = block.index + 1
                labels = (f"a{j}", f"b{j}", f"log sigma2_{j}")
            else:
                j = block.index + 1
                labels = (f"a{j}", f"b{j}_1", *(f"log gap{j}_{l}" for l in range(2, part.n_levels + 1)))
            suffix = ""
            if block.kind in ("mean", "kernel") and len(self._parts(self.template, block.kind)) > 1:
                suffix = f"[{self.template.groups[block.index]}]"
            names.extend(labels[k] + suffix for k in block.free_positions)
        return names

    def check(self, model: ModelSpec):
        for block in self.blocks:
            part = self._parts(model, block.kind)[block.index]
            full = self._component_free(block.kind, part)
            for k, value in block.fixed:
                if abs(full[k] - value) > FIXED_TOLERANCE * max(1.0, abs(value)):
                    raise ConstraintError(
                        f"{block.kind} {block.index}: constrained entry {k} is {full[k]!r}, must be {value!r}"
                    )

    def forward(self, model: ModelSpec) -> np.ndarray:
        self.check(model)
        x = np.empty(self.size)
        for block in self.blocks:
            part = self._parts(model, block.kind)[block.index]
            x[block.start:block.stop] = self._component_free(block.kind, part)[block.free_positions]
        return x

    def component(self, model, block, x_block):
        """Component of `block` rebuilt from its free entries."""
        part = self._parts(model, block.kind)[block.index]
        full = self._component_free(block.kind, part).copy()
        for k, value in block.fixed:
            full[k] = value
        full[block.free_positions] = x_block
        return self._component_from_free(block.kind, part, full)

    def inverse(self, x, base: Optional[ModelSpec] = None) -> ModelSpec:
        x = np.asarray(x, dtype=float)
        if x.size != self.size:
            raise ConstraintError(f"free vector has {x.size} entries, expected {self.size}")
        base = base or self.template
        means, kernels, items = list(base.means), list(base.kernels), list(base.measurement.items)
        target = {"mean": means, "kernel": kernels, "item": items}
        for block in self.blocks:
            target[block.kind][block.index] = self.component(base, block, x[block.start:block.stop])
        return base.with_components(means, kernels, base.measurement.with_items(items))

    def bounds(self):
        return [(-FREE_BOUND, FREE_BOUND)] * self.size


def apply_constraints(model: ModelSpec):
    """Free vector of `model` and the inverse map back to a constrained ModelSpec."""
    pmap = ParameterMap(model)
    return pmap.forward(model), pmap.inverse


def enforce_constraints(model: ModelSpec) -> ModelSpec:
    """Copy of `model` with every constrained entry moved to its fixed value."""
    pmap = ParameterMap(model)
    means, kernels, items = list(model.means), list(model.kernels), list(model.measurement.items)
    target = {"mean": means, "kernel": kernels, "item": items}
    for block in pmap.blocks:
        if not block.fixed:
            continue
        part = target[block.kind][block.index]
        full = pmap._component_free(block.kind, part).copy()
        for k, value in block.fixed:
            full[k] = value
        target[block.kind][block.index] = pmap._component_from_free(block.kind, part, full)
    return model.with_components(means, kernels, model.measurement.with_items(items))


def fixed_parameter_names(model: ModelSpec) -> List[str]:
    """Reported names whose values are set by the constraints rather than estimated."""
    names = []
    reference = ""
    if len(model.means) > 1:
        reference = f"[{model.groups[0]}]"
    if model.constraints.location == "intercept_zero":
        names.append("alpha0" + reference)
    kernel_ref = f"[{model.groups[0]}]" if len(model.kernels) > 1 else ""
    if model.constraints.scale == "kernel_scale":
        if isinstance(model.kernels[0], BasisLowRank):
            names.append("omega1" + kernel_ref)
        else:
            names.extend(["c" + kernel_ref, "c2" + kernel_ref])
    first = model.measurement.items[0]
    if model.constraints.scale == "first_loading":
        names.append("a1")
    if model.constraints.location == "first_item_location":
        names.append("b1_1" if isinstance(first, ProbitItem) else "b1")
    return names


def _median_gap(dataset: Dataset):
    gaps = [np.diff(series.times) for series in dataset.individuals if series.n_obs > 1]
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    if gaps.size == 0:
        return dataset.time_horizon / 4.0
    return float(np.median(gaps))


def _empirical_thresholds(column, n_levels):
    observed = column[~np.isnan(column)]
    if observed.size == 0:
        return tuple(float(v) for v in np.arange(n_levels) - 0.5 * (n_levels - 1))
    counts = np.bincount(observed.astype(int), minlength=n_levels + 1)
    cumulative = np.cumsum(counts)[:-1] / observed.size
    thresholds = ndtri(np.clip(cumulative, 1e-3, 1.0 - 1e-3))
    for l in range(1, thresholds.size):
        thresholds[l] = max(thresholds[l], thresholds[l - 1] + 1e-3)
    return tuple(float(v) for v in thresholds)


def initial_model(dataset: Dataset, template: ModelSpec, random_init=False, rng=None) -> ModelSpec:
    """
    Starting values: loadings 1; alpha from the grand response mean (linear) or 0 (probit);
    c^2 and sigma^2 split the response variance; kappa twice the median within-person gap;
    thresholds from cumulative category proportions. `random_init` jitters every free entry.
    """
    template.measurement.check(dataset.item_types)
    stacked = np.vstack([series.responses for series in dataset.individuals])
    constraints = template.constraints
    first = template.measurement.items[0]

    first_mean = float(np.nanmean(stacked[:, 0])) if isinstance(first, LinearFactorItem) else 0.0
    alpha0 = first_mean if constraints.location == "first_item_location" else 0.0

    items = []
    for j, item in enumerate(template.measurement.items):
        column = stacked[:, j]
        if isinstance(item, LinearFactorItem):
            mean = float(np.nanmean(column))
            variance = float(np.nanvar(column)) if np.sum(~np.isnan(column)) > 1 else 1.0
            items.append(LinearFactorItem(1.0, mean - alpha0, max(0.5 * variance, 1e-3)))
        else:
            items.append(ProbitItem(1.0, _empirical_thresholds(column, item.n_levels)))

    linear = [j for j, item in enumerate(template.measurement.items) if isinstance(item, LinearFactorItem)]
    if constraints.scale == "kernel_scale" or not linear:
        c = 1.0
    else:
        c = float(np.sqrt(max(0.5 * np.nanvar(stacked[:, linear[0]]), 1e-3)))
    kappa = max(2.0 * _median_gap(dataset), 1e-3)

    kernels = []
    for kernel in template.kernels:
        if isinstance(kernel, BasisLowRank):
            weights = (c,) + tuple(0.1 * c for _ in kernel.weights[1:])
            kernels.append(kernel.with_natural(weights))
        else:
            kernels.append(kernel.with_natural((c, kappa, *kernel.natural()[2:])))
    means = [mean.with_coefficients((alpha0,) + (0.0,) * (len(mean.coefficients) - 1)) for mean in template.means]

    model = enforce_constraints(
        template.with_components(means, kernels, template.measurement.with_items(items))
    )
    if random_init:
        if rng is None:
            raise ConstraintError("random_init needs a random stream")
        pmap = ParameterMap(model)
        x = pmap.forward(model)
        x = x + rng.uniform(-0.5, 0.5, size=x.size)
        model = pmap.inverse(x, model)
    logger.debug("initial parameters: %s", parameter_table(model))
    return model


def model_groups_for(dataset: Dataset, model: ModelSpec) -> Sequence[int]:
    """Group index of every individual; raises if the model is grouped and labels are missing."""
    if not model.is_grouped:
        return [0] * dataset.N
    missing = [series.individual_id for series in dataset.individuals if series.group is None]
    if missing:
        raise ConstraintError(f"grouped model needs a group label for every individual; missing for {missing[:5]}")
    return [model.group_index(series.group) for series in dataset.individuals]
