import csv
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from app.core.dataset import CovariateProfile, DataFormatError, Dataset, IndividualSeries, ItemType
from app.utils import atomic_write_frame

logger = logging.getLogger(__name__)

TIE_OFFSET = 1e-9
MISSING_TOKENS = {"", "na", "nan", "."}


@dataclass(frozen=True)
class CsvSchema:
    """
    Column mapping for EMA exports.
    Wide layout: id,time,<y1..yJ>[,group]. Long layout: id,time,item,value[,group],
    where `item` holds a response column name or a 1-based item index.
    """
    item_types: Tuple[ItemType, ...]
    id_column: str = "id"
    time_column: str = "time"
    response_columns: Tuple[str, ...] = ()
    group_column: Optional[str] = None
    layout: str = "wide"
    item_column: str = "item"
    value_column: str = "value"
    groups: Tuple[str, ...] = ()
    time_horizon: Optional[float] = None

    @property
    def item_names(self):
        if self.response_columns:
            return tuple(self.response_columns)
        return tuple(f"y{j + 1}" for j in range(len(self.item_types)))


def schema_for(dataset: Dataset) -> CsvSchema:
    """Schema that reads back what write_csv produces for `dataset`."""
    return CsvSchema(
        item_types=dataset.item_types,
        group_column="group" if any(series.group is not None for series in dataset.individuals) else None,
        groups=dataset.groups,
        time_horizon=dataset.time_horizon,
    )


def _parse_float(text, what, row):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataFormatError(f"row {row}: non-numeric {what} {text!r}") from None
    if not np.isfinite(value):
        raise DataFormatError(f"row {row}: non-finite {what} {text!r}")
    return value


def _parse_response(text, item, j, row):
    if text.strip().lower() in MISSING_TOKENS:
        return np.nan
    value = _parse_float(text, f"response for item {j + 1}", row)
    if item.is_ordinal and (value != round(value) or not 0 <= value <= item.n_levels):
        raise DataFormatError(f"row {row}: item {j + 1} level {text!r} outside 0..{item.n_levels}")
    return value


def _read_frame(path, schema):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path}: empty file") from None
    if frame.empty:
        raise DataFormatError(f"{path}: no data rows")
    if schema.layout == "wide":
        required = [schema.id_column, schema.time_column, *schema.item_names]
    elif schema.layout == "long":
        required = [schema.id_column, schema.time_column, schema.item_column, schema.value_column]
    else:
        raise DataFormatError(f"unknown layout {schema.layout!r}")
    if schema.group_column:
        required.append(schema.group_column)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing}")
    return frame


def _wide_rows(frame, schema):
    names = schema.item_names
    for k, row in enumerate(frame.itertuples(index=False, name=None), start=1):
        values = dict(zip(frame.columns, row))
        responses = [
            _parse_response(values[name], item, j, k) for j, (name, item) in enumerate(zip(names, schema.item_types))
        ]
        yield k, values, responses


def _long_rows(frame, schema):
    """Assemble occasions from item/value rows; a repeated item at one time opens a further occasion."""
    names = schema.item_names
    occasions = {}
    for k, row in enumerate(frame.itertuples(index=False, name=None), start=1):
        values = dict(zip(frame.columns, row))
        label = values[schema.item_column].strip()
        if label in names:
            j = names.index(label)
        elif label.isdigit() and 1 <= int(label) <= len(names):
            j = int(label) - 1
        else:
            raise DataFormatError(f"row {k}: unknown item {label!r}")
        key = (values[schema.id_column].strip(), _parse_float(values[schema.time_column], "time", k))
        stack = occasions.setdefault(key, [])
        slot = next((occasion for occasion in stack if j not in occasion[3]), None)
        if slot is None:
            slot = (k, values, [np.nan] * len(names), set())
            stack.append(slot)
        slot[2][j] = _parse_response(values[schema.value_column], schema.item_types[j], j, k)
        slot[3].add(j)
    for stack in occasions.values():
        for first_row, values, responses, _ in stack:
            yield first_row, values, responses


def _separate_ties(times, horizon):
    """
    Make sorted times strictly increasing: a repeated timestamp moves TIE_OFFSET after its
    predecessor, and a run of ties pushed past the horizon is moved back to end at it.
    Returns the number of moved entries.
    """
    ties = 0
    for s in range(1, times.size):
        if times[s] <= times[s - 1]:
            times[s] = max(times[s - 1] + TIE_OFFSET, np.nextafter(times[s - 1], np.inf))
            ties += 1
    if horizon is not None and times.size and times[-1] > horizon:
        times[-1] = horizon
        for s in range(times.size - 1, 0, -1):
            if times[s - 1] < times[s]:
                break
            times[s - 1] = min(times[s] - TIE_OFFSET, np.nextafter(times[s], -np.inf))
    return ties


def ingest_csv(path, schema: CsvSchema) -> Dataset:
    """
    Read an EMA export into a validated Dataset.
    Rows are grouped by individual and sorted by time; a repeated timestamp is kept and
    moved 1e-9 time units after its predecessor, or before its successor at the horizon.
    """
    frame = _read_frame(path, schema)
    rows = _wide_rows(frame, schema) if schema.layout == "wide" else _long_rows(frame, schema)
    declared = tuple(str(g) for g in schema.groups)
    per_id = {}
    for k, values, responses in rows:
        individual_id = str(values[schema.id_column]).strip()
        if not individual_id:
            raise DataFormatError(f"row {k}: empty id")
        time = _parse_float(values[schema.time_column], "time", k)
        if time < 0:
            raise DataFormatError(f"row {k}: negative time {time}")
        if schema.time_horizon is not None and time > schema.time_horizon:
            raise DataFormatError(f"row {k}: time {time} beyond horizon {schema.time_horizon}")
        group = None
        if schema.group_column:
            group = str(values[schema.group_column]).strip() or None
            if group is not None and declared and group not in declared:
                raise DataFormatError(f"row {k}: unknown group label {group!r}")
        entry = per_id.setdefault(individual_id, {"group": group, "times": [], "responses": []})
        if entry["group"] != group:
            raise DataFormatError(f"row {k}: individual {individual_id!r} changes group")
        entry["times"].append(time)
        entry["responses"].append(responses)

    individuals = []
    for individual_id, entry in per_id.items():
        times = np.asarray(entry["times"], dtype=float)
        order = np.argsort(times, kind="stable")
        times = times[order]
        responses = np.asarray(entry["responses"], dtype=float)[order]
        ties = _separate_ties(times, schema.time_horizon)
        if ties:
            logger.warning("individual %s: %d duplicate timestamp(s) shifted by %g", individual_id, ties, TIE_OFFSET)
        individuals.append(
            IndividualSeries(individual_id, times, responses, CovariateProfile(group=entry["group"]))
        )

    groups = declared
    if schema.group_column and not groups:
        groups = tuple(sorted({entry["group"] for entry in per_id.values()} - {None}))
    horizon = schema.time_horizon
    if horizon is None:
        horizon = float(max(series.times[-1] for series in individuals))
    return Dataset(tuple(individuals), tuple(schema.item_types), horizon, groups)


def write_csv(dataset: Dataset, path):
    """Write the wide layout id,time,y1..yJ[,group] with 17 significant digits."""
    if dataset.N == 0:
        raise DataFormatError("cannot write a dataset without individuals")
    names = [f"y{j + 1}" for j in range(dataset.J)]
    with_groups = any(series.group is not None for series in dataset.individuals)
    rows = []
    for record in dataset.records():
        row = {"id": record.individual_id, "time": record.time}
        row.update(zip(names, record.values))
        if with_groups:
            row["group"] = record.group or ""
        rows.append(row)
    columns = ["id", "time", *names] + (["group"] if with_groups else [])
    frame = pd.DataFrame(rows, columns=columns)
    atomic_write_frame(frame, path, index=False, float_format="%.17g", na_rep="")


def log_run(command, seed=None, n_individuals=0, n_observations=0, elapsed=0.0, status="ok", error=None,
            log_dir="logs"):
    """
    Logs each CLI run to runs.csv
    Columns: run_timestamp, command, seed, n_individuals, n_observations, elapsed_s, status, error
    """
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, "runs.csv")
    file_exists = os.path.exists(log_file)

    with open(log_file, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if not file_exists:
            writer.writerow(["run_timestamp", "command", "seed", "n_individuals", "n_observations",
                             "elapsed_s", "status", "error"])
        writer.writerow([
            datetime.now().isoformat(),
            command,
            "" if seed is None else seed,
            n_individuals,
            n_observations,
            f"{elapsed:.3f}",
            status,
            error or "",
        ])
