import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryosagd.io import (
    CTF_COLUMNS,
    DataError,
    load_checkpoint,
    load_dataset,
    parse_value,
    read_ctf_table,
    read_diagnostics,
    read_keyvalue,
    read_manifest,
    read_mrc,
    save_checkpoint,
    save_dataset,
    write_ctf_table,
    write_diagnostics,
    write_keyvalue,
    write_mrc,
)
from cryosagd.simulate import Dataset
from cryosagd.volume import CtfParams

HEADER = ",".join(CTF_COLUMNS) + "\n"


def test_mrc_volume_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(32, 32, 32)).astype(np.float32)
    p = tmp_path / "v.mrc"
    write_mrc(p, x, voxel_size=2.8, labels=["phantom"])
    m = read_mrc(p)
    assert m.data.dtype == np.float32
    np.testing.assert_array_equal(m.data, x)
    assert m.voxel_size == np.float32(2.8 * 32) / 32
    assert not m.stack
    assert m.labels == ["phantom"]


def test_mrc_voxel_size_exact_for_representable_values(tmp_path):
    p = tmp_path / "v.mrc"
    write_mrc(p, np.zeros((8, 8, 8)), voxel_size=1.5)
    assert read_mrc(p).voxel_size == 1.5


def test_mrc_header_fields(tmp_path):
    p = tmp_path / "v.mrc"
    write_mrc(p, np.zeros((8, 8, 8)), voxel_size=2.0)
    raw = p.read_bytes()
    assert struct.unpack_from("<4i", raw, 0) == (8, 8, 8, 2)
    assert struct.unpack_from("<3f", raw, 40) == (16.0, 16.0, 16.0)
    assert raw[208:212] == b"MAP "
    assert len(raw) == 1024 + 4 * 512


def test_mrc_stack_and_extended_header(tmp_path):
    x = np.random.default_rng(1).normal(size=(5, 16, 16)).astype(np.float32)
    p = tmp_path / "s.mrcs"
    ext = bytes(range(200))
    write_mrc(p, x, 3.0, stack=True, extended_header=ext)
    m = read_mrc(p)
    assert m.stack
    np.testing.assert_array_equal(m.data, x)
    assert m.extended_header == ext


def test_mrc_axis_order_x_fastest(tmp_path):
    x = np.zeros((8, 8, 8), dtype=np.float32)
    x[1, 0, 0] = 7.0
    p = tmp_path / "v.mrc"
    write_mrc(p, x)
    body = np.frombuffer(p.read_bytes()[1024:], dtype="<f4")
    assert body[1] == 7.0


def test_mrc_truncated_file(tmp_path):
    p = tmp_path / "v.mrc"
    write_mrc(p, np.ones((8, 8, 8)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-100])
    with pytest.raises(DataError, match=f"expected {len(raw)} bytes.*found {len(raw) - 100}"):
        read_mrc(p)
    p.write_bytes(raw[:500])
    with pytest.raises(DataError, match="truncated header"):
        read_mrc(p)


def test_mrc_big_endian_and_mode_rejected(tmp_path):
    p = tmp_path / "v.mrc"
    write_mrc(p, np.ones((8, 8, 8)))
    raw = bytearray(p.read_bytes())
    raw[212:214] = b"\x11\x11"
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="big-endian"):
        read_mrc(p)
    raw[212:214] = b"\x44\x44"
    struct.pack_into("<i", raw, 12, 1)
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="mode 1"):
        read_mrc(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([8, 10, 16]), st.floats(0.5, 10.0))
def test_mrc_round_trip_property(tmp_path_factory, seed, n, vs):
    x = np.random.default_rng(seed).normal(size=(n, n, n)).astype(np.float32)
    p = tmp_path_factory.mktemp("mrc") / "v.mrc"
    write_mrc(p, x, vs)
    np.testing.assert_array_equal(read_mrc(p).data, x)


def test_ctf_table_three_rows(tmp_path):
    p = tmp_path / "ctf.csv"
    p.write_text(HEADER + "0,15000,2.7,300,0.1,0\n1,20000.5,2.7,300,0.07,10\n"
                 "2,1.2e4,2.0,200,0.1,0\n")
    ctfs = read_ctf_table(p)
    assert len(ctfs) == 3
    assert ctfs[1] == CtfParams(20000.5, 2.7, 300.0, 0.07, 10.0)
    assert ctfs[2].defocus == 12000.0


def test_ctf_table_sorted_by_index(tmp_path):
    p = tmp_path / "ctf.csv"
    p.write_text(HEADER + "1,2000,2.7,300,0.1,0\n0,1000,2.7,300,0.1,0\n")
    assert [c.defocus for c in read_ctf_table(p)] == [1000.0, 2000.0]


@pytest.mark.parametrize("row,message", [
    ("0,-5,2.7,300,0.1,0", "line 3: defocus"),
    ("0,0,2.7,300,0.1,0", "line 3: defocus"),
    ('0,"1,5",2.7,300,0.1,0', "line 3: column 'defocus_A'"),
    ("0,abc,2.7,300,0.1,0", "line 3: column 'defocus_A'"),
    ("0,1000,2.7,300,0.1", "line 3: expected 6 cells"),
    ("1,1000,2.7,300,0.1,0", "line 3: duplicate index"),
])
def test_ctf_table_errors_name_the_line(tmp_path, row, message):
    p = tmp_path / "ctf.csv"
    p.write_text(HEADER + "1,1000,2.7,300,0.1,0\n" + row + "\n")
    with pytest.raises(DataError, match=message):
        read_ctf_table(p)


def test_ctf_table_missing_column(tmp_path):
    p = tmp_path / "ctf.csv"
    p.write_text("index,defocus_A,cs_mm,kv,amp_contrast\n0,1,2,3,0.1\n")
    with pytest.raises(DataError, match="missing column.*bfactor_A2"):
        read_ctf_table(p)


def test_ctf_table_round_trip(tmp_path):
    ctfs = [CtfParams(1e4 + 0.1 * i, 2.7, 300.0, 0.1, 5.0 * i) for i in range(4)]
    p = tmp_path / "ctf.csv"
    write_ctf_table(p, ctfs)
    assert read_ctf_table(p) == ctfs


def test_keyvalue_round_trip_and_comments(tmp_path):
    p = tmp_path / "c.cfg"
    write_keyvalue(p, {"a": 1, "b": 0.1, "c": None, "d": "exp"})
    with open(p, "a") as fh:
        fh.write("# comment\n\ne = 5  # trailing\n")
    kv = read_keyvalue(p)
    assert kv == {"a": "1", "b": "0.1", "c": "none", "d": "exp", "e": "5"}
    p.write_text("novalue\n")
    with pytest.raises(DataError, match="line 1"):
        read_keyvalue(p)


@pytest.mark.parametrize("text,kind,value", [
    ("3", int, 3), ("3.0", int, 3), ("1.5", float, 1.5), ("1e-3", float, 1e-3),
    ("none", float, None), ("true", bool, True), ("off", bool, False), ("car", str, "car"),
])
def test_parse_value(text, kind, value):
    assert parse_value(text, kind) == value


@pytest.mark.parametrize("text,kind", [("1,5", float), ("3.5", int), ("maybe", bool),
                                       ("nan", float)])
def test_parse_value_rejects(text, kind):
    with pytest.raises(ValueError):
        parse_value(text, kind)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ds = Dataset(rng.normal(size=(3, 8, 8)).astype(np.float32).astype(np.float64),
                 [CtfParams(1e4 * (i + 1)) for i in range(3)], 2.5, 0.7)
    path = save_dataset(tmp_path, ds, seed=11)
    m = read_manifest(path)
    assert (m.N, m.K, m.pixel_size, m.noise_sigma, m.seed) == (8, 3, 2.5, 0.7, 11)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.ctfs == ds.ctfs


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="manifest not found"):
        read_manifest(tmp_path / "nope.manifest")
    p = tmp_path / "m.manifest"
    p.write_text("stack = a.mrcs\nctf_table = a.csv\npixel_size = 1\nN = 8\nK = 2\n")
    with pytest.raises(DataError, match="a.mrcs"):
        read_manifest(p)
    p.write_text("stack = a.mrcs\n")
    with pytest.raises(DataError, match="missing key"):
        read_manifest(p)


def test_manifest_row_count_checked(tmp_path):
    ds = Dataset(np.zeros((2, 8, 8)), [CtfParams(1e4)] * 2, 1.0)
    path = save_dataset(tmp_path, ds)
    text = path.read_text().replace("K = 2", "K = 3")
    path.write_text(text)
    with pytest.raises(DataError, match="2 rows but manifest says K = 3"):
        load_dataset(path)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"v": rng.random((8, 8, 8)), "idx": np.arange(5), "c": rng.normal(size=3) + 1j}
    header = {"tau": 17, "L": 0.125, "nested": {"a": [1, 2]}}
    p = tmp_path / "ck.cfrg"
    save_checkpoint(p, header, arrays)
    assert p.read_bytes()[:5] == b"CFRG1"
    h, a = load_checkpoint(p)
    assert h == header
    for k in arrays:
        np.testing.assert_array_equal(a[k], arrays[k])
        assert a[k].dtype == arrays[k].dtype


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE!" + bytes(20))
    with pytest.raises(DataError, match="bad magic"):
        load_checkpoint(p)


def test_diagnostics_round_trip(tmp_path):
    rows = [{"iteration": 0, "rho": 0.1, "x": float("nan")}, {"iteration": 1, "rho": 0.2}]
    p = tmp_path / "d.csv"
    write_diagnostics(p, rows, ["iteration", "rho", "x"])
    back = read_diagnostics(p)
    assert back[0] == {"iteration": "0", "rho": "0.1", "x": "nan"}
    assert back[1]["x"] == ""
