"""Dataset readers/writers and persistence of statistics and fitted models.

Datasets are either CSV (``d`` coordinate columns then the response, optional
header line) or a flat binary file: 8-byte magic ``GSGPDATA``, two
little-endian uint64 (rows, columns), then row-major little-endian float64.

Statistics and models use a small container: 8-byte magic, uint64 header
length, a UTF-8 JSON header describing the arrays, then the raw arrays.
"""

from __future__ import annotations

import itertools
import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from .grid import Grid
from .interp import Scheme, SufficientStats

DATA_MAGIC = b"GSGPDATA"
STATS_MAGIC = b"GSGPSTAT"
MODEL_MAGIC = b"GSGPMODL"
DEFAULT_CHUNK = 1 << 16


class DataFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


# -- CSV ---------------------------------------------------------------------

def _is_numeric_row(line: str) -> bool:
    try:
        [float(tok) for tok in line.split(",")]
    except ValueError:
        return False
    return True


def _parse_lines(lines: list[str], first_lineno: int, d: int) -> np.ndarray:
    try:
        arr = np.loadtxt(lines, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError:
        arr = None
    if arr is None or arr.shape[1] != d + 1:
        for k, line in enumerate(lines):
            toks = line.split(",")
            if len(toks) != d + 1:
                raise DataFormatError(f"expected {d + 1} columns, found {len(toks)}", first_lineno + k)
            try:
                [float(t) for t in toks]
            except ValueError:
                raise DataFormatError(f"non-numeric value in {line.strip()!r}", first_lineno + k) from None
        raise DataFormatError("could not parse block", first_lineno)
    return arr


def iter_csv_chunks(path, d: int, chunk_rows: int = DEFAULT_CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(X, y)`` blocks of at most ``chunk_rows`` rows; constant memory in file length."""
    with open(path) as fh:
        lineno = 0
        first = True
        while True:
            block = list(itertools.islice(fh, chunk_rows))
            if not block:
                return
            start = lineno + 1
            lineno += len(block)
            if first:
                first = False
                if not _is_numeric_row(block[0]):
                    block = block[1:]
                    start += 1
            lines = [ln for ln in block if ln.strip()]
            if not lines:
                continue
            arr = _parse_lines(lines, start, d)
            yield arr[:, :d], arr[:, d]


def ingest_csv(path, d: int) -> Iterator[tuple[np.ndarray, float]]:
    """Stream ``(x, y)`` pairs from a CSV file."""
    for X, y in iter_csv_chunks(path, d):
        for i in range(y.size):
            yield X[i], float(y[i])


def write_csv(path, X, y, header: bool = True) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 1 and np.ndim(y) == 1 and len(y) > 1:
        X = X.T
    y = np.asarray(y, dtype=np.float64).ravel()
    d = X.shape[1]
    with open(path, "w") as fh:
        if header:
            fh.write(",".join([f"x{i}" for i in range(d)] + ["y"]) + "\n")
        np.savetxt(fh, np.column_stack([X, y]), delimiter=",", fmt="%.17g")


# -- flat binary -------------------------------------------------------------

class BinaryWriter:
    """Append rows to a binary dataset; the row count is patched on close."""

    def __init__(self, path, cols: int):
        self.path = Path(path)
        self.cols = int(cols)
        self.rows = 0
        self._fh = open(self.path, "wb")
        self._fh.write(DATA_MAGIC + struct.pack("<QQ", 0, self.cols))

    def write(self, X, y) -> None:
        block = np.column_stack([np.asarray(X, dtype=np.float64).reshape(len(y), -1), y])
        if block.shape[1] != self.cols:
            raise ValueError(f"expected {self.cols} columns, got {block.shape[1]}")
        self._fh.write(block.astype("<f8").tobytes())
        self.rows += block.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(len(DATA_MAGIC))
        self._fh.write(struct.pack("<QQ", self.rows, self.cols))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_binary(path, X, y) -> None:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    X = X.reshape(y.size, -1)
    with BinaryWriter(path, X.shape[1] + 1) as wr:
        wr.write(X, y)


def read_binary_header(fh) -> tuple[int, int]:
    head = fh.read(len(DATA_MAGIC) + 16)
    if len(head) < 24 or head[:8] != DATA_MAGIC:
        raise DataFormatError("not a GSGPDATA binary file")
    return struct.unpack("<QQ", head[8:])


def iter_binary_chunks(path, d: int, chunk_rows: int = DEFAULT_CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        rows, cols = read_binary_header(fh)
        if cols != d + 1:
            raise DataFormatError(f"file has {cols} columns, expected {d + 1}")
        left = rows
        while left:
            take = min(left, chunk_rows)
            block = np.fromfile(fh, dtype="<f8", count=take * cols)
            if block.size != take * cols:
                raise DataFormatError("binary file truncated")
            block = block.reshape(take, cols)
            yield block[:, :d], block[:, d]
            left -= take


def iter_chunks(path, d: int, chunk_rows: int = DEFAULT_CHUNK):
    """Dispatch on file content: binary if it starts with the magic, else CSV."""
    with open(path, "rb") as fh:
        is_bin = fh.read(len(DATA_MAGIC)) == DATA_MAGIC
    return iter_binary_chunks(path, d, chunk_rows) if is_bin else iter_csv_chunks(path, d, chunk_rows)


def load_dataset(path, d: int) -> tuple[np.ndarray, np.ndarray]:
    Xs, ys = [], []
    for X, y in iter_chunks(path, d):
        Xs.append(X)
        ys.append(y)
    if not ys:
        return np.zeros((0, d)), np.zeros(0)
    return np.vstack(Xs), np.concatenate(ys)


# -- containers --------------------------------------------------------------

def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        payload.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"meta": meta, "arrays": specs}).encode()
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<Q", len(header)) + header)
        for chunk in payload:
            fh.write(chunk)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != magic:
            raise DataFormatError(f"{path}: expected magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.fromfile(fh, dtype=dt, count=count)
            arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(dt.newbyteorder("="))
    return header["meta"], arrays


def save_stats(path, stats: SufficientStats) -> None:
    coo = stats.wtw.tocoo()
    meta = {
        "grid": stats.grid.to_dict(),
        "scheme": stats.scheme.value,
        "n": stats.n,
        "yty": stats.yty,
        "sum_y": stats.sum_y,
        "probe_seed": stats.probe_seed,
    }
    arrays = {
        "rows": coo.row.astype(np.int64),
        "cols": coo.col.astype(np.int64),
        "vals": coo.data.astype(np.float64),
        "wty": stats.wty,
    }
    if stats.probe_wtz is not None:
        arrays["probe_wtz"] = stats.probe_wtz
    write_container(path, STATS_MAGIC, meta, arrays)


def load_stats(path) -> SufficientStats:
    meta, arr = read_container(path, STATS_MAGIC)
    grid = Grid.from_dict(meta["grid"])
    m = grid.m
    wtw = sp.csr_matrix((arr["vals"], (arr["rows"], arr["cols"])), shape=(m, m))
    wtw.sort_indices()
    return SufficientStats(
        grid, Scheme(meta["scheme"]), wtw, arr["wty"], float(meta["yty"]), int(meta["n"]),
        float(meta["sum_y"]), arr.get("probe_wtz"), meta["probe_seed"],
    )
