"""Independent slow reference implementations used as test oracles."""
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def _periodic_diff(r, order):
    """1-D periodic central first difference (order=1) or second difference (order=2)."""
    eye = sp.identity(r, format="csr")
    fwd = sp.csr_matrix((np.ones(r), (np.arange(r), (np.arange(r) + 1) % r)), shape=(r, r))
    bwd = fwd.T.tocsr()
    if order == 1:
        return 0.5 * (fwd - bwd)
    return fwd + bwd - 2 * eye


def dense_periodic_poisson(v):
    """Solve lap(chi) = div(v) on a periodic grid by a direct sparse solve; zero-mean result."""
    r = v.shape[0]
    n = r ** 3
    eye = sp.identity(r, format="csr")
    ops = []
    for axis in range(3):
        mats = [eye, eye, eye]
        ops.append(mats)
    d1, d2 = _periodic_diff(r, 1), _periodic_diff(r, 2)

    def along(m, axis):
        mats = [eye, eye, eye]
        mats[axis] = m
        return sp.kron(sp.kron(mats[0], mats[1]), mats[2]).tocsr()

    lap = sum(along(d2, a) for a in range(3)).tolil()
    div = sum(along(d1, a) @ v[..., a].ravel() for a in range(3))
    # pin node 0 to remove the constant null space, then shift to zero mean
    lap[0, :] = 0
    lap[0, 0] = 1
    div[0] = 0
    chi = spla.spsolve(lap.tocsc(), div).reshape(r, r, r)
    return chi - chi.mean()


def brute_nn(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def loop_weighted_markers(inner, labels, conf, masks, alpha, k):
    out = np.full((k, 3), np.nan)
    for m in range(k):
        num, den, pts = np.zeros(3), 0.0, []
        for y, lab, c, mk in zip(inner, labels, conf, masks):
            for i in range(lab.shape[0]):
                for j in range(lab.shape[1]):
                    if mk[i, j] and lab[i, j] == m:
                        w = c[i, j] ** alpha
                        num += w * y[i, j]
                        den += w
                        pts.append(y[i, j])
        if pts:
            out[m] = num / den if den > 0 else np.mean(pts, axis=0)
    return out


def analytic_sphere_chamfer(mesh, centre, radius, n_mesh=1_000_000, n_sphere=20_000):
    """Chamfer between a mesh and an exact sphere.

    Accuracy uses the exact point-to-sphere distance of mesh samples.
    Completeness is the distance from evenly spread sphere points to a dense
    mesh sampling, which can only overestimate the true point-to-surface
    distance.
    """
    from scipy.spatial import cKDTree

    from hartgeom.geometry import sample_surface
    from hartgeom.synthetic import fibonacci_sphere

    centre = np.asarray(centre, dtype=np.float64)
    pts, _ = sample_surface(mesh, n_mesh, seed=0)
    acc = float(np.abs(np.linalg.norm(pts - centre, axis=1) - radius).mean())
    sphere, _ = fibonacci_sphere(n_sphere, radius, centre)
    comp = float(cKDTree(pts).query(sphere)[0].mean())
    return acc, comp, acc + comp
