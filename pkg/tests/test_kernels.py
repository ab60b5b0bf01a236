import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regmap import _kernels
from regmap.synthetic import rectangle_mesh

compiled = _kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def test_backend_flag_matches_selection():
    assert _kernels.BACKEND == ("cython" if compiled is not None else "python")


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(-0.2, 0.2))
def test_backends_agree(nx, ny, seed, margin):
    mesh = rectangle_mesh(nx, ny)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-margin, 1 + margin, (64, 2)) if margin > 0 else rng.uniform(0, 1, (64, 2))
    k = min(4, mesh.vertices.shape[0])
    _, cand = mesh._tree.query(pts, k=k)
    cand = np.ascontiguousarray(np.atleast_2d(cand), dtype=np.int64)
    # any element ids serve as candidate lists; misses fall back to a full scan
    cand = np.minimum(cand, mesh.n_elements - 1)
    cand[:, -1] = -1  # padding entries are ignored
    ref = _kernels.python_backend.locate_candidates(pts, mesh.origin, mesh.jac_inv, cand, 1e-12)
    got = compiled.locate_candidates(pts, mesh.origin, mesh.jac_inv, cand, 1e-12)
    assert np.array_equal(np.asarray(ref[0]), np.asarray(got[0]))
    assert np.array_equal(np.asarray(ref[2]), np.asarray(got[2]))
    assert np.allclose(np.asarray(ref[1]), np.asarray(got[1]), rtol=0, atol=1e-14)

    vals = rng.standard_normal(mesh.vertices.shape[0])
    grads = np.ascontiguousarray(mesh._field_gradients(vals))
    elem = np.asarray(ref[0])
    lam = np.ascontiguousarray(ref[1])
    v1, g1 = _kernels.python_backend.p1_interpolate(elem, lam, mesh.triangles, vals, grads)
    v2, g2 = compiled.p1_interpolate(elem, lam, mesh.triangles, vals, grads)
    assert np.allclose(v1, np.asarray(v2), rtol=0, atol=1e-13)
    assert np.array_equal(np.asarray(g1), np.asarray(g2))


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("REGMAP_PURE_PYTHON", "1")
    mod = importlib.reload(_kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.locate_candidates is mod.python_backend.locate_candidates
    finally:
        monkeypatch.delenv("REGMAP_PURE_PYTHON")
        importlib.reload(_kernels)
