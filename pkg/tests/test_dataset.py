import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shipid.dataset import (
    Dataset, DatasetFormatError, SchemaVersionError, Trajectory, datasets_equal, read_dataset, write_dataset,
)

floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


def random_dataset(rng, k=None):
    trajs = []
    for _ in range(k if k is not None else rng.integers(1, 4)):
        n = int(rng.integers(1, 30))
        acc = rng.normal(size=(n, 3)) * 10.0 ** rng.integers(-8, 3) if rng.random() < 0.7 else None
        trajs.append(Trajectory(np.arange(n) * 0.1, rng.normal(size=(n, 6)) * 1e3, rng.normal(size=(n, 2)),
                                np.abs(rng.normal(size=(n, 2))), acc, str(rng.choice(list("TZRB"))), 0.1))
    return Dataset(trajs)


def test_round_trip_many(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(20):
        ds = random_dataset(rng)
        p = tmp_path / f"d{k}.csv"
        write_dataset(ds, p)
        assert datasets_equal(read_dataset(p), ds)


@given(st.lists(floats, min_size=6, max_size=6))
def test_round_trip_extreme_values(tmp_path_factory, row):
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    tr = Trajectory([0.0], [row], [[row[0], row[1]]], [[abs(row[2]), row[3]]], [row[3:]], "Z", 0.05)
    write_dataset(Dataset([tr]), p)
    assert datasets_equal(read_dataset(p), Dataset([tr]))


def test_header_layout(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "d.csv"
    write_dataset(random_dataset(rng, 1), p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# shipid-dataset version=1 trajectories=1")
    assert lines[1].startswith("# trajectory label=")
    assert lines[2].startswith("t,X,Y,psi,u,vm,r,n,delta,U_A,gamma_a")


def _write(tmp_path, rng):
    p = tmp_path / "d.csv"
    write_dataset(random_dataset(rng, 2), p)
    return p


def test_truncated_file(tmp_path, rng):
    p = _write(tmp_path, rng)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(p)


def test_nan_cell_rejected(tmp_path, rng):
    p = _write(tmp_path, rng)
    lines = p.read_text().splitlines()
    cells = lines[4].split(",")
    cells[5] = "nan"
    lines[4] = ",".join(cells)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as info:
        read_dataset(p)
    assert "channel vm" in str(info.value) and "row 1" in str(info.value)
    assert info.value.line == 5


def test_schema_version_rejected(tmp_path, rng):
    p = _write(tmp_path, rng)
    p.write_text(p.read_text().replace("version=1", "version=7", 1))
    with pytest.raises(SchemaVersionError):
        read_dataset(p)


def test_bad_headers(tmp_path, rng):
    p = _write(tmp_path, rng)
    text = p.read_text()
    for bad in (text.replace("shipid-dataset", "other", 1), text.replace("t,X,Y", "t,Y,X", 1),
                "", text + "extra\n", text.replace("0.1", "zz", 1)):
        p.write_text(bad)
        with pytest.raises(DatasetFormatError):
            read_dataset(p)


def test_datasets_equal_detects_differences(rng):
    a = random_dataset(rng, 2)
    b = Dataset([t.copy() for t in a])
    assert datasets_equal(a, b)
    b.trajectories[1].states[0, 0] = np.nextafter(b.trajectories[1].states[0, 0], np.inf)
    assert not datasets_equal(a, b)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.arange(3), np.zeros((2, 6)), np.zeros((3, 2)), np.zeros((3, 2)))


def test_dataset_queries(small_dataset):
    assert small_dataset.labels() == ["T", "Z", "R", "B"]
    assert small_dataset.dt == 0.1 and small_dataset.has_accels
    assert small_dataset.durations() == pytest.approx({"T": 30.0, "Z": 30.0, "R": 30.0, "B": 30.0})
    assert len(small_dataset.by_label("Z")) == 1
    frames = small_dataset.trajectories[0].frames()
    assert frames.shape == (300, 7)
