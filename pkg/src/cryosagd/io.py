"""File formats: MRC2014 maps, CTF tables, manifests, configs, checkpoints, diagnostics."""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import CtfParams

MRC_HEADER_BYTES = 1024
CHECKPOINT_MAGIC = b"CFRG1"
CHECKPOINT_VERSION = 1
CTF_COLUMNS = ("index", "defocus_A", "cs_mm", "kv", "amp_contrast", "bfactor_A2")

_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# --------------------------------------------------------------------- MRC

@dataclass
class MrcMap:
    """Contents of an MRC file.

    ``data`` is indexed ``[x, y, z]`` for volumes and ``[k, x, y]`` for image
    stacks (``stack=True``).
    """

    data: np.ndarray
    voxel_size: float
    extended_header: bytes = b""
    stack: bool = False
    labels: list = field(default_factory=list)


def write_mrc(path, data, voxel_size=1.0, stack=False, extended_header=b"", labels=()):
    """Write a mode-2 (float32) little-endian MRC2014 file."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
        stack = True
    if arr.ndim != 3:
        raise ValueError("MRC data must be 2D or 3D")
    # file order is x fastest, then y, then z (or section)
    if stack:
        body = np.ascontiguousarray(np.transpose(arr, (0, 2, 1)), dtype="<f4")
        nz, ny, nx = body.shape
    else:
        body = np.ascontiguousarray(np.transpose(arr, (2, 1, 0)), dtype="<f4")
        nz, ny, nx = body.shape
    hdr = bytearray(MRC_HEADER_BYTES)
    struct.pack_into("<3i", hdr, 0, nx, ny, nz)
    struct.pack_into("<i", hdr, 12, 2)
    struct.pack_into("<3i", hdr, 28, nx, ny, 1 if stack else nz)
    zlen = voxel_size if stack else nz * voxel_size
    struct.pack_into("<3f", hdr, 40, nx * voxel_size, ny * voxel_size, zlen)
    struct.pack_into("<3f", hdr, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", hdr, 64, 1, 2, 3)
    if body.size:
        struct.pack_into("<3f", hdr, 76, float(body.min()), float(body.max()), float(body.mean()))
    struct.pack_into("<i", hdr, 88, 0 if stack else 1)
    struct.pack_into("<i", hdr, 92, len(extended_header))
    hdr[104:108] = b"MRCO"
    struct.pack_into("<i", hdr, 108, 20140)
    hdr[208:212] = b"MAP "
    hdr[212:216] = bytes([0x44, 0x44, 0, 0])
    struct.pack_into("<f", hdr, 216, float(body.std()) if body.size else 0.0)
    labels = list(labels)[:10]
    struct.pack_into("<i", hdr, 220, len(labels))
    for i, lab in enumerate(labels):
        b = lab.encode("ascii", "replace")[:80]
        hdr[224 + 80 * i:224 + 80 * i + len(b)] = b
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(bytes(extended_header))
        fh.write(body.tobytes())


def read_mrc(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < MRC_HEADER_BYTES:
        raise DataError(f"{path}: truncated header, expected {MRC_HEADER_BYTES} bytes, "
                        f"found {len(raw)}")
    machst = raw[212:214]
    if machst[0] == 0x11:
        raise DataError(f"{path}: big-endian MRC files are not supported")
    nx, ny, nz, mode = struct.unpack_from("<4i", raw, 0)
    if mode != 2:
        raise DataError(f"{path}: unsupported MRC mode {mode} (only mode 2, float32)")
    if min(nx, ny, nz) < 1:
        raise DataError(f"{path}: invalid dimensions {nx} x {ny} x {nz}")
    mz = struct.unpack_from("<i", raw, 36)[0]
    cella = struct.unpack_from("<3f", raw, 40)
    ispg = struct.unpack_from("<i", raw, 88)[0]
    nsymbt = struct.unpack_from("<i", raw, 92)[0]
    nlabl = struct.unpack_from("<i", raw, 220)[0]
    labels = [raw[224 + 80 * i:304 + 80 * i].rstrip(b"\0 ").decode("ascii", "replace")
              for i in range(max(0, min(nlabl, 10)))]
    start = MRC_HEADER_BYTES + nsymbt
    expected = start + 4 * nx * ny * nz
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {nx} x {ny} x {nz} float32 "
                        f"data, found {len(raw)}")
    ext = raw[MRC_HEADER_BYTES:start]
    body = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=start).reshape(nz, ny, nx)
    voxel = cella[0] / nx if nx else 1.0
    stack = ispg == 0 and (mz == 1 or nz != nx)
    if stack:
        data = np.transpose(body, (0, 2, 1)).copy()
    else:
        if not nx == ny == nz:
            raise DataError(f"{path}: volume must be cubic, got {nx} x {ny} x {nz}")
        data = np.transpose(body, (2, 1, 0)).copy()
    return MrcMap(data, float(voxel), bytes(ext), stack, labels)


# --------------------------------------------------------------- CTF table

def _number(cell, line, column):
    s = cell.strip()
    if not _NUMBER.match(s):
        raise DataError(f"line {line}: column {column!r} is not a number: {cell!r}")
    return float(s)


def read_ctf_table(path):
    """Per-image CTF parameters ordered by ``index``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty CTF table") from None
        missing = [c for c in CTF_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in CTF_COLUMNS}
        rows = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} cells, got {len(row)}")
            vals = {c: _number(row[col[c]], line, c) for c in CTF_COLUMNS}
            idx = vals["index"]
            if idx != int(idx) or idx < 0:
                raise DataError(f"{path}: line {line}: index must be a non-negative integer")
            idx = int(idx)
            if idx in rows:
                raise DataError(f"{path}: line {line}: duplicate index {idx}")
            if vals["defocus_A"] <= 0:
                raise DataError(f"{path}: line {line}: defocus must be positive")
            try:
                rows[idx] = CtfParams(vals["defocus_A"], vals["cs_mm"], vals["kv"],
                                      vals["amp_contrast"], vals["bfactor_A2"])
            except ValueError as e:
                raise DataError(f"{path}: line {line}: {e}") from None
    return [rows[i] for i in sorted(rows)]


def write_ctf_table(path, ctfs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CTF_COLUMNS)
        for i, c in enumerate(ctfs):
            w.writerow([i, repr(c.defocus), repr(c.spherical_aberration), repr(c.voltage),
                        repr(c.amplitude_contrast), repr(c.envelope_b_factor)])


# --------------------------------------------------------- key = value text

def read_keyvalue(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {line_no}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if not k:
                raise DataError(f"{path}: line {line_no}: empty key")
            out[k] = v
    return out


def write_keyvalue(path, mapping):
    with open(path, "w") as fh:
        for k, v in mapping.items():
            fh.write(f"{k} = {format_value(v)}\n")


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text, kind):
    """Convert config text to ``kind`` (``int``, ``float``, ``str`` or ``bool``)."""
    t = text.strip()
    if t.lower() in ("none", ""):
        return None
    if kind is bool:
        if t.lower() in ("1", "true", "yes", "on"):
            return True
        if t.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, float):
        if not _NUMBER.match(t):
            raise ValueError(f"not a number: {text!r}")
        val = float(t)
        if kind is int:
            if val != int(val):
                raise ValueError(f"not an integer: {text!r}")
            return int(val)
        return val
    return t


# ----------------------------------------------------------------- dataset

@dataclass
class DatasetManifest:
    stack: Path
    ctf_table: Path
    pixel_size: float
    N: int
    K: int
    noise_sigma: float = None
    seed: int = None

    def to_dict(self, base=None):
        def rel(p):
            return os.path.relpath(p, base) if base else str(p)

        d = {"stack": rel(self.stack), "ctf_table": rel(self.ctf_table),
             "pixel_size": self.pixel_size, "N": self.N, "K": self.K}
        if self.noise_sigma is not None:
            d["noise_sigma"] = self.noise_sigma
        if self.seed is not None:
            d["seed"] = self.seed
        return d


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    kv = read_keyvalue(path)
    for key in ("stack", "ctf_table", "pixel_size", "N", "K"):
        if key not in kv:
            raise DataError(f"{path}: missing key {key!r}")
    base = path.parent
    try:
        m = DatasetManifest(
            stack=base / kv["stack"],
            ctf_table=base / kv["ctf_table"],
            pixel_size=parse_value(kv["pixel_size"], float),
            N=parse_value(kv["N"], int),
            K=parse_value(kv["K"], int),
            noise_sigma=parse_value(kv.get("noise_sigma", "none"), float),
            seed=parse_value(kv.get("seed", "none"), int),
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    for p in (m.stack, m.ctf_table):
        if not p.is_file():
            raise DataError(f"{path}: referenced file not found: {p}")
    return m


def load_dataset(manifest_path):
    from .simulate import Dataset

    m = read_manifest(manifest_path)
    mrc = read_mrc(m.stack)
    images = mrc.data if mrc.stack else np.transpose(mrc.data, (2, 0, 1))
    ctfs = read_ctf_table(m.ctf_table)
    if len(ctfs) != m.K:
        raise DataError(f"{m.ctf_table}: {len(ctfs)} rows but manifest says K = {m.K}")
    if images.shape != (m.K, m.N, m.N):
        raise DataError(f"{m.stack}: stack shape {images.shape} does not match "
                        f"K = {m.K}, N = {m.N}")
    return Dataset(images.astype(np.float64), ctfs, m.pixel_size, m.noise_sigma,
                   {"seed": m.seed, "manifest": str(manifest_path)})


def save_dataset(directory, dataset, name="particles", seed=None):
    """Write stack, CTF table and manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stack = d / f"{name}.mrcs"
    table = d / f"{name}_ctf.csv"
    write_mrc(stack, dataset.images, dataset.pixel_size, stack=True)
    write_ctf_table(table, dataset.ctfs)
    m = DatasetManifest(stack, table, float(dataset.pixel_size), dataset.N, dataset.K,
                        dataset.noise_sigma, seed)
    path = d / f"{name}.manifest"
    write_keyvalue(path, m.to_dict(base=d))
    return path


def write_truth(path, truth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "qw", "qx", "qy", "qz", "shift_x_A", "shift_y_A", "defocus_A"])
        for i, (q, t, df) in enumerate(zip(truth.quaternions, truth.shifts, truth.defocus)):
            w.writerow([i, *map(repr, map(float, q)), repr(float(t[0])), repr(float(t[1])),
                        repr(float(df))])


# -------------------------------------------------------------- checkpoint

def save_checkpoint(path, header, arrays):
    """Write ``CFRG1`` + version + JSON header + ``npz`` payload."""
    blob = json.dumps(header, sort_keys=True).encode()
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", raw, 5)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 5 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + n])
    with np.load(_io.BytesIO(raw[start + n:]), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    return header, arrays


# ------------------------------------------------------------- diagnostics

def write_diagnostics(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def read_diagnostics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
