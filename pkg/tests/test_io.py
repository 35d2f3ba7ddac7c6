import numpy as np
import pytest

from gsgp import io
from gsgp.bench import SyntheticSpec, gen_sine
from gsgp.grid import Grid
from gsgp.interp import stats_from_arrays


def test_csv_roundtrip_exact(tmp_path):
    X, y = gen_sine(SyntheticSpec(500, seed=3))
    p = tmp_path / "d.csv"
    io.write_csv(p, X, y)
    X2, y2 = io.load_dataset(p, 1)
    np.testing.assert_allclose(X2, X, rtol=1e-15, atol=0)
    np.testing.assert_allclose(y2, y, rtol=1e-15, atol=0)
    pairs = list(io.ingest_csv(p, 1))
    assert len(pairs) == 500 and pairs[7][1] == y[7]


def test_header_detection(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n0.5,1.0\n0.25,2.0\n")
    X, y = io.load_dataset(p, 1)
    assert X.ravel().tolist() == [0.5, 0.25] and y.tolist() == [1.0, 2.0]
    q = tmp_path / "b.csv"
    q.write_text("0.5,1.0\n0.25,2.0\n")
    assert io.load_dataset(q, 1)[1].tolist() == [1.0, 2.0]


def test_column_mismatch_line_one(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("0.5,1.0\n0.25,2.0\n")
    with pytest.raises(io.DataFormatError) as exc:
        io.load_dataset(p, 2)
    assert exc.value.line == 1


def test_bad_value_line_number(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n3,4\n5,abc\n")
    with pytest.raises(io.DataFormatError) as exc:
        io.load_dataset(p, 1)
    assert exc.value.line == 4


def test_chunked_csv_spans_blocks(tmp_path):
    X, y = gen_sine(SyntheticSpec(1000, seed=1))
    p = tmp_path / "d.csv"
    io.write_csv(p, X, y)
    chunks = list(io.iter_csv_chunks(p, 1, chunk_rows=64))
    assert sum(len(c[1]) for c in chunks) == 1000
    np.testing.assert_array_equal(np.concatenate([c[1] for c in chunks]), y)


def test_binary_roundtrip_and_chunks(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.random((300, 3)), rng.standard_normal(300)
    p = tmp_path / "d.bin"
    io.write_binary(p, X, y)
    X2, y2 = io.load_dataset(p, 3)
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, y)
    assert [len(c[1]) for c in io.iter_chunks(p, 3, 128)] == [128, 128, 44]
    with pytest.raises(io.DataFormatError):
        list(io.iter_chunks(p, 1))


def test_truncated_binary(tmp_path):
    p = tmp_path / "d.bin"
    io.write_binary(p, np.ones((10, 1)), np.ones(10))
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(io.DataFormatError):
        io.load_dataset(p, 1)


def test_stats_persistence(tmp_path):
    rng = np.random.default_rng(5)
    g = Grid((0.0, 0.0), (9.0, 9.0), (10, 10))
    X = rng.uniform(1, 8, (200, 2))
    y = rng.standard_normal(200)
    s = stats_from_arrays(g, X, y, "cubic", num_probes=3, probe_seed=11)
    p = tmp_path / "s.bin"
    io.save_stats(p, s)
    t = io.load_stats(p)
    assert t.grid == s.grid and t.scheme == s.scheme and t.n == 200 and t.probe_seed == 11
    assert abs(t.wtw - s.wtw).max() == 0
    np.testing.assert_array_equal(t.wty, s.wty)
    np.testing.assert_array_equal(t.probe_wtz, s.probe_wtz)
    with pytest.raises(io.DataFormatError):
        io.read_container(p, io.MODEL_MAGIC)
