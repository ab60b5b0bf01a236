"""Pure numpy versions of the compiled kernels in ``_locate.pyx``."""

import numpy as np


def _bary(points, origin, binv, elems):
    d = points[:, None, :] - origin[elems]
    l12 = np.einsum("pkij,pkj->pki", binv[elems], d)
    l0 = 1.0 - l12[..., 0] - l12[..., 1]
    return np.concatenate([l0[..., None], l12], axis=-1)


def locate_candidates(points, origin, binv, cand, tol):
    """Same contract as the compiled ``locate_candidates``."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    cand = np.asarray(cand, dtype=np.int64)
    valid = cand >= 0
    safe = np.where(valid, cand, 0)
    lam = _bary(points, origin, binv, safe)
    mins = lam.min(axis=-1)
    inside = (mins >= -tol) & valid
    big = np.iinfo(np.int64).max
    key = np.where(inside, safe, big)
    pick = key.argmin(axis=1)
    found = inside[np.arange(n), pick]
    score = np.where(valid, mins, -np.inf)
    best = score.argmax(axis=1)
    col = np.where(found, pick, best)
    rows = np.arange(n)
    elem = safe[rows, col]
    lam_out = lam[rows, col]

    missing = np.flatnonzero(~found)
    if missing.size:
        ne = origin.shape[0]
        allel = np.broadcast_to(np.arange(ne), (missing.size, ne))
        lam_all = _bary(points[missing], origin, binv, allel)
        ok = lam_all.min(axis=-1) >= -tol
        has = ok.any(axis=1)
        first = ok.argmax(axis=1)
        for r, p in enumerate(missing):
            if has[r]:
                elem[p] = first[r]
                lam_out[p] = lam_all[r, first[r]]
                found[p] = True
    return elem.astype(np.int64), lam_out, found


def p1_interpolate(elem, lam, triangles, values, grads):
    """Same contract as the compiled ``p1_interpolate``."""
    vals = np.einsum("pi,pi->p", lam, values[triangles[elem]])
    return vals, grads[elem].copy()
