import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vpr.config import load_config, parse_config
from vpr.errors import ConfigError, FormatError
from vpr.io import read_csv, read_grid, read_grid_header, write_csv, write_grid

MIN_PSI = """
[grid]
nz = 2
nx = 3
[bounds]
lower = 1000
upper = 3000
[forward]
kind = acoustic
data = d.vprd
[survey]
sources = 0 1
"""


# -- config ----------------------------------------------------------------------------------
def test_psi_defaults():
    cfg = parse_config(MIN_PSI, mode="psi", check_files=False)
    assert cfg.iterations == 5000
    assert cfg.samples == 2
    assert cfg.seed == 0 and cfg.threads == 1
    assert cfg.get("optimizer", "lr") == 1e-2
    assert cfg.get("survey", "sources") == [(0, 1)]
    assert cfg.get("bounds", "lower") == [1000.0]


def test_vpr_defaults():
    text = ("[grid]\nnz = 1\nnx = 2\n[bounds]\nunbounded = yes\n[vpr]\nq_old = q.vprq\n"
            "[prior_new]\nfamily = gaussian\n")
    cfg = parse_config(text, mode="vpr", check_files=False)
    assert cfg.samples == 10 and cfg.iterations == 5000
    assert cfg.get("vpr", "clamp") == 50.0


def test_misspelled_key_reports_line():
    text = MIN_PSI + "[optimizer]\n# tuned\niteratons = 10\n"
    line = text.splitlines().index("iteratons = 10") + 1
    with pytest.raises(ConfigError, match=rf"line {line}:.*iteratons"):
        parse_config(text, mode="psi", check_files=False)


@pytest.mark.parametrize("bad, needle", [
    ("[optimizer]\niterations = many\n", "integer"),
    ("[optimizer]\niterations = 0\n", "iterations"),
    ("[optimizer]\nlr = -1\n", "lr"),
    ("[mystery]\nx = 1\n", "mystery"),
    ("[optimizer\n", "header"),
    ("[optimizer]\nlr = 1\nlr = 2\n", "duplicate"),
    ("[prior]\nfamily = cauchy\n", "family"),
    ("[run]\nseed = -3\n", "seed"),
    ("[optimizer]\njust text\n", "line"),
])
def test_config_errors(bad, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(MIN_PSI + bad, mode="psi", check_files=False)


def test_missing_required_key():
    with pytest.raises(ConfigError, match="nx"):
        parse_config("[grid]\nnz = 3\n", mode="psi", check_files=False)


def test_missing_file_is_reported(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(MIN_PSI)
    with pytest.raises(ConfigError, match="d.vprd"):
        load_config(p, mode="psi")
    (tmp_path / "d.vprd").write_bytes(b"")
    cfg = load_config(p, mode="psi")
    assert str(cfg.get("forward", "data")) == str(tmp_path / "d.vprd")


def test_canonical_text_round_trip():
    cfg = parse_config(MIN_PSI, mode="psi", check_files=False)
    again = parse_config(cfg.to_text(), mode="psi", check_files=False)
    assert again.to_text() == cfg.to_text()


# -- grids ---------------------------------------------------------------------------------
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(width=32, allow_nan=False)))
def test_grid_round_trip_is_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("g") / "a.vprg"
    write_grid(p, arr)
    back = read_grid(p)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back.astype(np.float32).view(np.uint32), arr.view(np.uint32))


def test_grid_layout(tmp_path):
    p = tmp_path / "g.vprg"
    write_grid(p, np.arange(6, dtype=float).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:4] == b"VPRG"
    assert struct.unpack_from("<II", raw, 4) == (3, 2)
    assert np.frombuffer(raw[12:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_grid_errors(tmp_path):
    p = tmp_path / "g.vprg"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        read_grid(p)
    write_grid(p, np.zeros((3, 3)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_grid(p)
    p.write_bytes(b"VPRG" + struct.pack("<II", 70000, 70000))
    with pytest.raises(FormatError):
        read_grid(p)
    p.write_bytes(b"VPRG\x01")
    with pytest.raises(FormatError):
        read_grid(p)


def test_marmousi_sized_header(tmp_path):
    p = tmp_path / "m.vprg"
    write_grid(p, np.zeros((110, 250)))
    assert read_grid_header(p) == (250, 110)
    assert read_grid(p).shape == (110, 250)


def test_csv_round_trip(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["a", "b"], [(1, 2.5), (3, -1e-300)])
    head, arr = read_csv(p)
    assert head == ["a", "b"]
    assert arr.tolist() == [[1, 2.5], [3, -1e-300]]
