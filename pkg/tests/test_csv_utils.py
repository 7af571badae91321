import numpy as np
import pytest

from app.core.csv_utils import CsvSchema, ingest_csv, log_run, schema_for, write_csv
from app.core.dataset import CovariateProfile, DataFormatError, Dataset, IndividualSeries, ItemType


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_wide_rows_are_grouped_and_sorted(tmp_path):
    path = _write(tmp_path, "id,time,y1\nb,2.0,0.5\na,1.0,1.5\na,0.5,2.5\n")
    dataset = ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(),)))
    assert dataset.ids == ["b", "a"]
    a = dataset.by_id("a")
    np.testing.assert_array_equal(a.times, [0.5, 1.0])
    np.testing.assert_array_equal(a.responses[:, 0], [2.5, 1.5])
    assert dataset.time_horizon == 2.0


def test_single_row_dataset(tmp_path):
    path = _write(tmp_path, "id,time,y1\n7,0,1.0\n")
    dataset = ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(),)))
    assert dataset.N == 1
    assert dataset.individuals[0].n_obs == 1


def test_missing_response_is_nan(tmp_path):
    path = _write(tmp_path, "id,time,y1,y2\n1,0.1,,2\n1,0.2,NA,1\n")
    schema = CsvSchema(item_types=(ItemType.continuous(), ItemType.ordinal(2)))
    series = ingest_csv(path, schema).individuals[0]
    assert np.isnan(series.responses[:, 0]).all()
    np.testing.assert_array_equal(series.responses[:, 1], [2.0, 1.0])


def test_duplicate_timestamps_are_separated(tmp_path):
    path = _write(tmp_path, "id,time,y1\n1,1.0,0.0\n1,1.0,1.0\n")
    series = ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(),))).individuals[0]
    assert series.times[1] > series.times[0]
    assert series.times[1] - series.times[0] == pytest.approx(1e-9)


def test_duplicate_timestamps_at_the_horizon_stay_inside(tmp_path):
    path = _write(tmp_path, "id,time,y1\n1,2.0,0.7\n1,2.0,0.9\n1,1.0,0.1\n")
    dataset = ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(),), time_horizon=2.0))
    series = dataset.individuals[0]
    assert series.times[-1] == 2.0
    assert series.times[1] == pytest.approx(2.0 - 1e-9, abs=1e-12)
    assert series.times[1] < series.times[2]
    np.testing.assert_array_equal(series.responses[:, 0], [0.1, 0.7, 0.9])


@pytest.mark.parametrize("text, message", [
    ("id,time,y1\n1,-1,0.0\n", "negative time"),
    ("id,time,y1\n1,abc,0.0\n", "non-numeric"),
    ("id,time\n1,0.5\n", "missing columns"),
])
def test_malformed_rows_raise(tmp_path, text, message):
    path = _write(tmp_path, text)
    with pytest.raises(DataFormatError, match=message):
        ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(),)))


def test_ordinal_level_out_of_range(tmp_path):
    path = _write(tmp_path, "id,time,y1\n1,0.5,3\n")
    with pytest.raises(DataFormatError):
        ingest_csv(path, CsvSchema(item_types=(ItemType.ordinal(2),)))


def test_long_layout_matches_wide(tmp_path):
    wide = _write(tmp_path, "id,time,y1,y2\n1,0.5,1.0,0\n1,1.5,2.0,1\n", "wide.csv")
    long = _write(tmp_path, "id,time,item,value\n1,0.5,y1,1.0\n1,0.5,y2,0\n1,1.5,1,2.0\n1,1.5,2,1\n", "long.csv")
    types = (ItemType.continuous(), ItemType.ordinal(1))
    a = ingest_csv(wide, CsvSchema(item_types=types))
    b = ingest_csv(long, CsvSchema(item_types=types, layout="long"))
    assert a.equals(b)


def test_long_layout_repeated_item_is_kept_like_wide(tmp_path):
    wide = _write(tmp_path, "id,time,y1,y2\n1,1.0,0.5,1\n1,1.0,0.7,\n", "wide.csv")
    long = _write(tmp_path, "id,time,item,value\n1,1.0,1,0.5\n1,1.0,1,0.7\n1,1.0,2,1\n", "long.csv")
    types = (ItemType.continuous(), ItemType.ordinal(1))
    a = ingest_csv(wide, CsvSchema(item_types=types))
    b = ingest_csv(long, CsvSchema(item_types=types, layout="long"))
    assert b.individuals[0].n_obs == 2
    assert a.equals(b)


def test_long_layout_strips_ids(tmp_path):
    path = _write(tmp_path, "id,time,item,value\n1 ,0.5,y1,1.0\n1,0.5,y2,0\n")
    dataset = ingest_csv(path, CsvSchema(item_types=(ItemType.continuous(), ItemType.ordinal(1)), layout="long"))
    assert dataset.ids == ["1"]
    np.testing.assert_array_equal(dataset.individuals[0].responses, [[1.0, 0.0]])


def test_write_then_read_keeps_groups_and_gaps(tmp_path):
    individuals = (
        IndividualSeries("1", [0.1, 0.7], [[0.25, np.nan], [1.0 / 3.0, 2.0]], CovariateProfile(group="0")),
        IndividualSeries("2", [0.3], [[-1.5, 0.0]], CovariateProfile(group="1")),
    )
    dataset = Dataset(individuals, (ItemType.continuous(), ItemType.ordinal(2)), 1.0, ("0", "1"))
    path = str(tmp_path / "out.csv")
    write_csv(dataset, path)
    assert ingest_csv(path, schema_for(dataset)).equals(dataset)


def test_write_then_read_keeps_partial_group_labels(tmp_path):
    individuals = (
        IndividualSeries("1", [0.1], [[0.5]], CovariateProfile(group="0")),
        IndividualSeries("2", [0.3], [[-1.5]]),
    )
    dataset = Dataset(individuals, (ItemType.continuous(),), 1.0, ("0",))
    path = str(tmp_path / "out.csv")
    write_csv(dataset, path)
    again = ingest_csv(path, schema_for(dataset))
    assert again.equals(dataset)
    assert [series.group for series in again.individuals] == ["0", None]


def test_log_run_appends_rows(tmp_path):
    log_dir = str(tmp_path / "logs")
    log_run("fit", seed=1, n_individuals=3, n_observations=9, elapsed=0.5, log_dir=log_dir)
    log_run("curve", status="invalid", error="bad", log_dir=log_dir)
    lines = (tmp_path / "logs" / "runs.csv").read_text(encoding="utf-8").strip().splitlines()
    assert lines[0].startswith("run_timestamp,command")
    assert len(lines) == 3
    assert lines[2].endswith("invalid,bad")
