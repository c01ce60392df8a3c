"""Independent reference implementations and finite-difference oracles for the loss tests."""
from __future__ import annotations

import numpy as np

from gclkit.loss import GroupBatch, LossConfig, hardest_negatives, loss_f, loss_hn, loss_pos_pairwise, loss_pp, \
    loss_pv, total_loss

STEP = 1e-6
KINK = 1e-4


def _norm(v, r):
    return np.sum(np.abs(v) ** r, axis=-1) ** (1.0 / r)


def ref_values(X, gid, finest, pairs, cfg: LossConfig, X0=None):
    """Loss terms for a stack of feature arrays X (K, N, d), written from the formulas directly."""
    G = gid.max() + 1
    sizes = np.bincount(gid)
    onehot = (gid[None, :] == np.arange(G)[:, None]) / sizes[:, None]
    mu = np.einsum("gn,knd->kgd", onehot, X)
    w = 1.0 / (G * sizes[gid])
    out = {}
    n = _norm(X[:, pairs[:, 0]] - X[:, pairs[:, 1]], cfg.r)
    out["pp"] = np.maximum(n - cfg.m1, 0).sum(axis=1) / G
    n = _norm(X - mu[:, gid], cfg.r)
    out["pv"] = (np.maximum(n - cfg.m2, 0) * w).sum(axis=1)
    fin = (X0 if cfg.block_finest_gradient else X)[..., finest, :]
    n = _norm(fin - mu, cfg.r)
    out["f"] = np.maximum(n - cfg.m3, 0).sum(axis=1) / G
    D = _norm(X[:, :, None, :] - X[:, None, :, :], cfg.r)
    D[:, gid[:, None] == gid[None, :]] = np.inf
    H = D.min(axis=2)
    out["hn"] = (np.maximum(cfg.m4 - H, 0) * w).sum(axis=1)
    tot = 0.0
    if cfg.enable_pp:
        tot = tot + cfg.lambda1 * out["pp"]
    if cfg.enable_pv:
        tot = tot + cfg.lambda1 * out["pv"]
    if cfg.enable_f:
        tot = tot + cfg.lambda2 * out["f"]
    if cfg.enable_hn:
        tot = tot + cfg.lambda3 * out["hn"]
    out["total"] = tot
    return out


def fd_gradient(fun, X, step=STEP, chunk=512):
    """Central differences of ``fun`` (stack -> values) at every coordinate of X."""
    N, d = X.shape
    eye = np.eye(N * d).reshape(N * d, N, d) * step
    grad = np.empty(N * d)
    for s in range(0, N * d, chunk):
        e = eye[s:s + chunk]
        grad[s:s + chunk] = (fun(X[None] + e) - fun(X[None] - e)) / (2 * step)
    return grad.reshape(N, d)


def rel_error(analytic, numeric) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def random_instance(rng, g_range=(3, 20), size_range=(2, 7), d=16):
    """Groups of unit features clustered around random centres, with random finest members and PP pairs."""
    G = int(rng.integers(g_range[0], g_range[1] + 1))
    sizes = rng.integers(size_range[0], size_range[1] + 1, size=G)
    groups = []
    for s in sizes:
        c = rng.normal(size=d)
        f = c / np.linalg.norm(c) + rng.uniform(0.05, 0.6) * rng.normal(size=(s, d)) / np.sqrt(d)
        groups.append(f / np.linalg.norm(f, axis=1, keepdims=True))
    batch = GroupBatch.from_groups(groups, [int(rng.integers(0, s)) for s in sizes])
    return batch


def near_kink(batch: GroupBatch, pairs, cfg: LossConfig) -> bool:
    """True when any hinge argument is within KINK of its kink or a hardest negative is near-tied."""
    X = batch.features
    gid = batch.group
    G = batch.n_groups
    mu = np.stack([X[gid == g].mean(axis=0) for g in range(G)])
    checks = [
        _norm(X[pairs[:, 0]] - X[pairs[:, 1]], cfg.r) - cfg.m1,
        _norm(X - mu[gid], cfg.r) - cfg.m2,
        _norm(X[batch.finest] - mu, cfg.r) - cfg.m3,
    ]
    D = _norm(X[:, None] - X[None], cfg.r)
    D[gid[:, None] == gid[None, :]] = np.inf
    Ds = np.sort(D, axis=1)
    checks.append(Ds[:, 0] - cfg.m4)
    if np.any(Ds[:, 1] - Ds[:, 0] < KINK):
        return True
    return any(np.any(np.abs(c) < KINK) for c in checks)


def fd_all_terms(X, gid, finest, pairs, cfg: LossConfig, step=STEP, chunk=256) -> dict:
    """Central differences of every loss term at every coordinate of X.

    PP/PV/F are evaluated from the formulas on a stack of perturbed copies.
    HN is evaluated exactly but incrementally: a perturbation of row i only
    changes row/column i of the distance matrix, so every other row's
    hardest negative is min(best distance excluding column i, new distance
    to row i), using each row's precomputed best and second-best negatives.
    """
    N, d = X.shape
    G = gid.max() + 1
    sizes = np.bincount(gid)
    w = 1.0 / (G * sizes[gid])
    # hardest-negative bookkeeping at the base point
    D0 = _norm(X[:, None] - X[None], cfg.r)
    D0[gid[:, None] == gid[None, :]] = np.inf
    order = np.argsort(D0, axis=1, kind="stable")
    best_j, second_j = order[:, 0], order[:, 1]
    best_d, second_d = D0[np.arange(N), best_j], D0[np.arange(N), second_j]

    def hn_row_perturbed(i, xi):
        di = _norm(xi[None] - X, cfg.r)
        di[gid == gid[i]] = np.inf
        excl = np.where(best_j == i, second_d, best_d)  # best negative of each row without column i
        H = np.minimum(excl, di)
        H[i] = di.min()
        return float(np.sum(np.maximum(cfg.m4 - H, 0) * w))

    coords = [(i, c) for i in range(N) for c in range(d)]
    out = {k: np.empty(N * d) for k in ("pp", "pv", "f", "f_bf", "hn")}
    bf = LossConfig(**{**cfg.to_dict(), "block_finest_gradient": True})
    for s in range(0, len(coords), chunk):
        block = coords[s:s + chunk]
        E = np.zeros((len(block), N, d))
        for k, (i, c) in enumerate(block):
            E[k, i, c] = step
        plus, minus = X[None] + E, X[None] - E
        vp = ref_values_light(plus, gid, finest, pairs, cfg, X)
        vm = ref_values_light(minus, gid, finest, pairs, cfg, X)
        bp = ref_values_light(plus, gid, finest, pairs, bf, X)["f"]
        bm = ref_values_light(minus, gid, finest, pairs, bf, X)["f"]
        for key in ("pp", "pv", "f"):
            out[key][s:s + len(block)] = (vp[key] - vm[key]) / (2 * step)
        out["f_bf"][s:s + len(block)] = (bp - bm) / (2 * step)
        for k, (i, c) in enumerate(block):
            out["hn"][s + k] = (hn_row_perturbed(i, plus[k, i]) - hn_row_perturbed(i, minus[k, i])) / (2 * step)
    return {k: v.reshape(N, d) for k, v in out.items()}


def ref_values_light(X, gid, finest, pairs, cfg: LossConfig, X0):
    """PP, PV and F terms of :func:`ref_values` (no pairwise distance matrix)."""
    G = gid.max() + 1
    sizes = np.bincount(gid)
    onehot = (gid[None, :] == np.arange(G)[:, None]) / sizes[:, None]
    mu = np.einsum("gn,knd->kgd", onehot, X)
    w = 1.0 / (G * sizes[gid])
    n = _norm(X[:, pairs[:, 0]] - X[:, pairs[:, 1]], cfg.r)
    out = {"pp": np.maximum(n - cfg.m1, 0).sum(axis=1) / G}
    n = _norm(X - mu[:, gid], cfg.r)
    out["pv"] = (np.maximum(n - cfg.m2, 0) * w).sum(axis=1)
    fin = (X0[None] if cfg.block_finest_gradient else X)[:, finest, :]
    n = _norm(fin - mu, cfg.r)
    out["f"] = np.maximum(n - cfg.m3, 0).sum(axis=1) / G
    return out


def check_all_gradients(batch: GroupBatch, cfg: LossConfig, pairs) -> dict:
    """Max relative error of every analytic gradient against central differences."""
    X = batch.features
    errs = {}
    # Eq. 1 on the sampled pairs, as two separate feature sets
    fa, fb = X[pairs[:, 0]], X[pairs[:, 1]]
    pos = loss_pos_pairwise(fa, fb, cfg.m1, cfg.r)
    both = np.concatenate([fa, fb])
    n = len(fa)
    num = fd_gradient(lambda S: np.maximum(_norm(S[:, :n] - S[:, n:], cfg.r) - cfg.m1, 0).mean(axis=1), both)
    errs["pos"] = rel_error(np.concatenate([pos.grad[0], pos.grad[1]]), num)
    fd = fd_all_terms(X, batch.group, batch.finest, pairs, cfg)
    bf = LossConfig(**{**cfg.to_dict(), "block_finest_gradient": True})
    errs["pp"] = rel_error(loss_pp(batch, cfg, pairs).grad, fd["pp"])
    errs["pv"] = rel_error(loss_pv(batch, cfg).grad, fd["pv"])
    errs["f"] = rel_error(loss_f(batch, cfg).grad, fd["f"])
    errs["f_bf"] = rel_error(loss_f(batch, bf).grad, fd["f_bf"])
    errs["hn"] = rel_error(loss_hn(batch, cfg).grad, fd["hn"])
    gcl_fd = cfg.lambda1 * fd["pv"] + cfg.lambda2 * fd["f"] + cfg.lambda3 * fd["hn"]
    errs["total"] = rel_error(total_loss(batch, cfg).grad, gcl_fd)
    pp_cfg = LossConfig.pcl(r=cfg.r, m1=cfg.m1, m4=cfg.m4)
    errs["total_pp"] = rel_error(total_loss(batch, pp_cfg, pairs).grad, fd["pp"] + fd["hn"])
    return errs


def reference_matches_library(batch: GroupBatch, cfg: LossConfig, pairs) -> float:
    """Largest gap between the reference formulas and the library values at the base point."""
    X = batch.features
    r = ref_values(X[None], batch.group, batch.finest, pairs, cfg, X0=X)
    lib = {"pp": loss_pp(batch, cfg, pairs).value, "pv": loss_pv(batch, cfg).value,
           "f": loss_f(batch, cfg).value, "hn": loss_hn(batch, cfg).value, "total": total_loss(batch, cfg).value}
    return max(abs(float(r[k][0]) - v) for k, v in lib.items())


def brute_hardest_negative(F, gid, i, r=2.0):
    best, arg = np.inf, -1
    for j in range(len(F)):
        if gid[j] == gid[i]:
            continue
        diff = F[i] - F[j]
        d = float(np.sqrt(np.sum(diff * diff))) if r == 2 else float(np.sum(np.abs(diff) ** r) ** (1.0 / r))
        if d < best:
            best, arg = d, j
    return best, arg


__all__ = ["ref_values", "fd_gradient", "rel_error", "random_instance", "near_kink", "check_all_gradients",
           "reference_matches_library", "brute_hardest_negative", "hardest_negatives"]


def planted_registration(seed: int, n: int = 200, outlier_frac: float = 0.6, sigma: float = 0.05,
                         extent: float = 20.0):
    """Correspondences between a random cloud and its transformed, noisy copy with a share of wrong pairings.

    Returns (correspondences, source points, target points, ground truth mapping target into source).
    """
    from gclkit.corr import Correspondences
    from gclkit.geom import RigidTransform
    rng = np.random.default_rng(seed)
    gt = RigidTransform.random(rng, extent)
    target = rng.uniform(-extent, extent, size=(n, 3))
    source = gt.apply(target) + rng.normal(0.0, sigma, size=(n, 3))
    idx_b = np.arange(n)
    bad = rng.choice(n, size=int(round(outlier_frac * n)), replace=False)
    idx_b[bad] = (bad + rng.integers(1, n, size=len(bad))) % n  # always a different point
    return Correspondences(np.arange(n), idx_b, np.zeros(n)), source, target, gt
