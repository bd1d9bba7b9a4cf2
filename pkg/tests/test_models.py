import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cemgms.grid import build_fine_mesh
from cemgms.models import (
    BETA_HIGH,
    BETA_LOW,
    MARGIN,
    ModelRaster,
    RasterError,
    blobs,
    load_or_generate_beta,
    nodal_raster,
    parse_model_spec,
    read_grid,
    stripes,
    write_grid,
)


def test_constant_generator():
    r = load_or_generate_beta("constant(1)", 5, 4)
    assert r.values.shape == (4, 5) and np.all(r.values == 1.0)
    assert r.provenance == "constant(1)"


@pytest.mark.parametrize("spec", ["blobs(7)", "stripes", "blobs(seed=3)"])
def test_two_level_generators(spec):
    r = load_or_generate_beta(spec, 200, 200)
    assert set(np.unique(r.values)) == {BETA_LOW, BETA_HIGH}


def test_generators_keep_margin():
    for v in (blobs(100, 100, 11), stripes(100, 100)):
        m = int(MARGIN * 100)
        high = v == BETA_HIGH
        assert not high[:m].any() and not high[-m:].any()
        assert not high[:, :m].any() and not high[:, -m:].any()


def test_blobs_deterministic():
    assert np.array_equal(blobs(50, 50, 7), blobs(50, 50, 7))
    assert not np.array_equal(blobs(50, 50, 7), blobs(50, 50, 8))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_is_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("g") / "a.grid"
    write_grid(path, values)
    back = read_grid(path)
    assert np.array_equal(back.view(np.int64), np.ascontiguousarray(values).view(np.int64))


def test_malformed_files_report_line(tmp_path):
    p = tmp_path / "bad.grid"
    p.write_text("2 2\n1 2\n3 x\n")
    with pytest.raises(RasterError, match=":3:"):
        read_grid(p)
    p.write_text("2 2\n1 2 3\n4 5\n")
    with pytest.raises(RasterError, match=":2:"):
        read_grid(p)
    p.write_text("2\n1 2\n")
    with pytest.raises(RasterError, match=":1:"):
        read_grid(p)
    p.write_text("2 3\n1 2\n")
    with pytest.raises(RasterError, match="expected 3 data rows"):
        read_grid(p)
    p.write_text("")
    with pytest.raises(RasterError):
        read_grid(p)


def test_file_model_and_resampling(tmp_path):
    p = tmp_path / "m.grid"
    write_grid(p, [[1.0, 2.0], [3.0, 4.0]])
    r = load_or_generate_beta(str(p), 4, 4)
    assert r.provenance == str(p)
    up = r.resample(4, 4)
    assert up.values.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    mesh = build_fine_mesh(2, 2)
    cv = r.cell_values(mesh)
    # square (i=1, j=0) holds value 2 for both of its triangles
    assert cv[2] == cv[3] == 2.0
    with pytest.raises(RasterError):
        load_or_generate_beta(str(tmp_path / "missing.grid"), 2, 2)


def test_spec_parsing():
    assert parse_model_spec("blobs(7)") == ("blobs", [7.0])
    assert parse_model_spec(" stripes ") == ("stripes", [])
    assert parse_model_spec("some/file.grid") is None
    with pytest.raises(RasterError):
        parse_model_spec("blobs(x)")
    with pytest.raises(RasterError):
        load_or_generate_beta("constant(1, 2, 3, 4)", 2, 2)


def test_nodal_raster_shape():
    mesh = build_fine_mesh(3, 2)
    assert nodal_raster(mesh, np.arange(mesh.n_nodes)).shape == (3, 4)
    assert ModelRaster(np.ones((2, 3)), "x").width == 3
