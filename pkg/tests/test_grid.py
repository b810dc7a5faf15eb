import os
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pita.errors import BadMagic, Truncated, TrajectoryIOError, VersionMismatch
from pita.grid import (
    HEADER_SIZE,
    Grid,
    Rng,
    Trajectory,
    decode_trajectory,
    read_trajectory,
    slice_window,
    write_trajectory,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid.periodic_1d(7, 1.0, 0.1)
    with pytest.raises(ValueError):
        Grid(ndim=1, nx=8, dx=0.0, dt=0.1)
    with pytest.raises(ValueError):
        Grid(ndim=1, nx=8, dx=0.1, dt=-1.0)
    g = Grid(ndim=1, nx=8, dx=0.1, dt=0.1, ny=5, dy=3.0)
    assert (g.ny, g.dy) == (1, 1.0)
    g2 = Grid.periodic_2d(8, 12, 1.0, 2.0, 0.1)
    assert g2.n == 96 and g2.shape == (8, 12)


def test_trajectory_rejects_nonfinite_and_is_readonly(grid1d):
    data = np.zeros((3, 1, 16))
    data[1, 0, 3] = np.nan
    with pytest.raises(ValueError):
        Trajectory(grid1d, data)
    src = np.ones((3, 1, 16))
    traj = Trajectory(grid1d, src)
    src[0] = 5.0
    assert np.all(traj.data == 1.0)
    with pytest.raises(ValueError):
        traj.data[0, 0, 0, 0] = 2.0
    assert traj.data.shape == (3, 1, 16, 1)


def test_file_size_matches_header_arithmetic(tmp_path):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    traj = Trajectory(g, np.arange(16.0).reshape(2, 1, 8))
    path = tmp_path / "a.pita"
    write_trajectory(traj, path)
    assert HEADER_SIZE == 4 + 2 + 1 + 1 + 12 + 24
    assert os.path.getsize(path) == 172


def test_header_layout_is_little_endian(tmp_path):
    g = Grid.periodic_2d(8, 9, 2.0, 3.0, 0.25)
    traj = Trajectory(g, np.zeros((3, 2, 8, 9)))
    path = tmp_path / "b.pita"
    write_trajectory(traj, path)
    raw = path.read_bytes()
    assert raw[:4] == b"PITA"
    assert struct.unpack("<H", raw[4:6]) == (1,)
    assert raw[6] == 2 and raw[7] == 2
    assert struct.unpack("<III", raw[8:20]) == (8, 9, 3)
    assert struct.unpack("<ddd", raw[20:44]) == (0.25, 3.0 / 9, 0.25)


def test_round_trip(tmp_path, rng):
    g = Grid.periodic_1d(16, 2.0, 0.05)
    traj = Trajectory(g, rng.normal(size=(5, 2, 16)))
    path = tmp_path / "c.pita"
    write_trajectory(traj, path)
    back = read_trajectory(path)
    assert back == traj
    assert back.grid == g


@settings(max_examples=100, deadline=None)
@given(
    ndim=st.sampled_from([1, 2]),
    channels=st.integers(1, 3),
    nx=st.integers(8, 64),
    ny=st.integers(8, 12),
    nt=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(ndim, channels, nx, ny, nt, seed):
    r = np.random.default_rng(seed)
    g = Grid.periodic_1d(nx, r.random() + 0.5, r.random() + 0.01) if ndim == 1 else Grid.periodic_2d(
        nx, ny, r.random() + 0.5, r.random() + 0.5, r.random() + 0.01
    )
    traj = Trajectory(g, r.normal(size=(nt, channels) + g.shape) * 10.0 ** r.integers(-5, 5))
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.pita")
        write_trajectory(traj, p)
        with open(p, "rb") as fh:
            blob = fh.read()
    assert decode_trajectory(blob) == traj


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pita"
    path.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(BadMagic):
        read_trajectory(path)


def test_truncated_payload(tmp_path):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    path = tmp_path / "t.pita"
    write_trajectory(Trajectory(g, np.ones((10, 1, 8))), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: HEADER_SIZE + 9 * 8 * 8])  # header says nt=10, payload holds nt=9
    with pytest.raises(Truncated):
        read_trajectory(path)
    with pytest.raises(Truncated):
        decode_trajectory(raw[:20])


def test_version_mismatch(tmp_path):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    path = tmp_path / "v.pita"
    write_trajectory(Trajectory(g, np.ones((2, 1, 8))), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionMismatch):
        decode_trajectory(bytes(raw))


def test_unwritable_directory_leaves_no_file(tmp_path):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    target = tmp_path / "missing" / "x.pita"
    with pytest.raises(TrajectoryIOError) as info:
        write_trajectory(Trajectory(g, np.ones((2, 1, 8))), target)
    assert str(target) in str(info.value)
    assert isinstance(info.value, OSError)
    ro = tmp_path / "ro"
    ro.mkdir()
    os.chmod(ro, 0o500)
    try:
        if os.access(ro, os.W_OK):  # running as root: permissions are not enforced
            pytest.skip("permission bits not enforced for this user")
        with pytest.raises(TrajectoryIOError):
            write_trajectory(Trajectory(g, np.ones((2, 1, 8))), ro / "x.pita")
        assert list(ro.iterdir()) == []
    finally:
        os.chmod(ro, 0o700)


def test_failed_write_removes_temp_file(tmp_path, monkeypatch):
    g = Grid.periodic_1d(8, 1.0, 0.1)

    def boom(src, dst):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(TrajectoryIOError):
        write_trajectory(Trajectory(g, np.ones((2, 1, 8))), tmp_path / "y.pita")
    assert list(tmp_path.iterdir()) == []


def test_slice_window_examples(rng):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    traj = Trajectory(g, rng.normal(size=(20, 1, 8)))
    a = slice_window(traj, 0, 10)
    assert a.nt == 10 and np.array_equal(a.data[0], traj.data[0])
    b = slice_window(traj, 10, 10)
    assert np.array_equal(b.data, traj.data[10:20])
    with pytest.raises(IndexError):
        slice_window(traj, 15, 10)
    assert a.data is not traj.data and not np.shares_memory(a.data, traj.data)


def test_slice_window_composes(rng):
    g = Grid.periodic_1d(8, 1.0, 0.1)
    traj = Trajectory(g, rng.normal(size=(30, 2, 8)))
    assert slice_window(slice_window(traj, 5, 20), 3, 7) == slice_window(traj, 8, 7)


def test_rng_determinism_and_children():
    a = Rng(42).raw(10_000)
    b = Rng(42).raw(10_000)
    assert np.array_equal(a, b)
    assert int(Rng(42).raw(1)[0]) == int(np.random.PCG64(42).random_raw(1)[0])
    c0, c1 = Rng(7).child(0), Rng(7).child(1)
    assert not np.array_equal(c0.raw(16), c1.raw(16))
    assert np.array_equal(Rng(7).child(3).raw(8), Rng(7).child(3).raw(8))
