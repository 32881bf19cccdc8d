"""EPnP, EPnP-RANSAC, focal refinement and registration metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .geom import CameraModel, Pose, orthonormalize


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 1000
    reprojection_threshold: float = 4.0
    min_inliers: int = 6
    seed: int = 0
    refine_focal: bool = False
    confidence: float = 0.999  # adaptive early stop; 1.0 runs every iteration

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.reprojection_threshold <= 0:
            raise ValueError("reprojection_threshold must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")
        if not 0 < self.confidence <= 1:
            raise ValueError("confidence must lie in (0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    tau_r: float = 10.0  # degrees
    tau_t: float = 5.0   # meters

    def __post_init__(self):
        if self.tau_r <= 0 or self.tau_t <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class RegistrationResult:
    pose: Pose | None
    inlier_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rre: float = float("nan")
    rte: float = float("nan")
    success: bool = False
    camera: CameraModel | None = None
    iterations: int = 0

    def evaluate(self, gt: Pose, cfg: EvalConfig = EvalConfig()) -> "RegistrationResult":
        """Fill ``rre``/``rte``/``success`` against ground truth."""
        if self.pose is None:
            self.rre, self.rte, self.success = float("inf"), float("inf"), False
            return self
        self.rre, self.rte = registration_errors(self.pose, gt)
        self.success = bool(self.rre < cfg.tau_r and self.rte < cfg.tau_t)
        return self


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

def _control_points(pw):
    """Centroid plus principal axes scaled by the data spread."""
    c0 = pw.mean(axis=0)
    centered = pw - c0
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    # singular vectors have arbitrary sign; fix it so the control points do not
    # depend on the order of the correspondences
    vt *= np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])[:, None]
    scale = sv / np.sqrt(len(pw))
    if scale[0] <= 0 or scale[1] < 1e-10 * scale[0]:
        raise DegenerateConfiguration("points are (nearly) collinear")
    planar = len(scale) < 3 or scale[2] < 1e-8 * scale[0]
    n_axes = 2 if planar else 3
    ctrl = [c0] + [c0 + scale[k] * vt[k] for k in range(n_axes)]
    return np.array(ctrl), planar


def _barycentric(pw, ctrl):
    base = (ctrl[1:] - ctrl[0]).T  # 3 x k
    coef, *_ = np.linalg.lstsq(base, (pw - ctrl[0]).T, rcond=None)
    coef = coef.T
    return np.concatenate([1.0 - coef.sum(axis=1, keepdims=True), coef], axis=1)


def _reprojection_errors(pose: Pose, pw, xn):
    """Errors in normalized image units; points behind the camera get inf."""
    pc = pose.apply(pw)
    z = pc[:, 2]
    err = np.full(len(pw), np.inf)
    ok = z > 0
    err[ok] = np.linalg.norm(pc[ok, :2] / z[ok, None] - xn[ok], axis=1)
    return err


def _pixel_errors(pose: Pose, pw, uv, cam: CameraModel):
    pc = pose.apply(pw)
    z = pc[:, 2]
    err = np.full(len(pw), np.inf)
    ok = z > 0
    proj_u = cam.fx * pc[ok, 0] / z[ok] + cam.cx
    proj_v = cam.fy * pc[ok, 1] / z[ok] + cam.cy
    err[ok] = np.hypot(proj_u - uv[ok, 0], proj_v - uv[ok, 1])
    return err


def _procrustes(pw, pc):
    """Rigid (R, t) with pc ≈ R pw + t."""
    mw, mc = pw.mean(axis=0), pc.mean(axis=0)
    H = (pc - mc).T @ (pw - mw)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mc - R @ mw


def _gauss_newton_betas(betas, dv, rho, iterations=10):
    """Refine betas so camera control-point distances match world ones.

    A step is kept only if it lowers the squared residual.
    """
    b = np.array(betas, dtype=np.float64)

    def residual(beta):
        D = np.einsum("k,kpj->pj", beta, dv)  # (pairs, 3)
        return (D * D).sum(axis=1) - rho, D

    r, D = residual(b)
    cost = float(r @ r)
    for _ in range(iterations):
        J = 2.0 * np.einsum("pj,kpj->pk", D, dv)
        try:
            step = np.linalg.solve(J.T @ J, -(J.T @ r))
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        cand = b + step
        r_new, D_new = residual(cand)
        cost_new = float(r_new @ r_new)
        if not cost_new < cost:
            break
        b, r, D, cost = cand, r_new, D_new, cost_new
        if np.linalg.norm(step) < 1e-12 * max(1.0, np.linalg.norm(b)):
            break
    return b


def _pose_from_betas(betas, null_vecs, alphas, pw, xn, n_ctrl):
    cc = np.einsum("k,kj->j", betas, null_vecs).reshape(n_ctrl, 3)
    pc = alphas @ cc
    if np.mean(pc[:, 2]) < 0:
        pc = -pc
    R, t = _procrustes(pw, pc)
    pose = Pose(orthonormalize(R), t)
    err = _reprojection_errors(pose, pw, xn)
    return pose, float(np.mean(err))


def _betas_from_products(B, n):
    """Recover (b_1..b_n) from the linearized products, ordered B11, B12, B22, B13, ..."""
    idx = {}
    k = 0
    for j in range(n):
        for i in range(j + 1):
            idx[(i, j)] = k
            k += 1
    b11 = B[idx[(0, 0)]]
    b1 = math.sqrt(abs(b11))
    betas = np.zeros(n)
    betas[0] = b1
    if b1 == 0:
        return betas
    for j in range(1, n):
        betas[j] = B[idx[(0, j)]] / b1
    return betas


def epnp(points_3d, pixels, cam: CameraModel, gauss_newton: bool = True) -> Pose:
    """Efficient PnP from >= 4 correspondences.

    Uses four control points (three for planar data), the null space of the
    2n x 3k projection system and the usual one-to-four-dimensional beta
    cases, each polished by Gauss-Newton on control-point distances; the
    candidate with the lowest reprojection error wins.
    """
    pw = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pw)
    if n < 4 or len(uv) != n:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {n}")
    xn = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy], axis=1)

    ctrl, planar = _control_points(pw)
    n_ctrl = len(ctrl)
    alphas = _barycentric(pw, ctrl)

    M = np.zeros((2 * n, 3 * n_ctrl))
    for j in range(n_ctrl):
        M[0::2, 3 * j] = alphas[:, j]
        M[0::2, 3 * j + 2] = -alphas[:, j] * xn[:, 0]
        M[1::2, 3 * j + 1] = alphas[:, j]
        M[1::2, 3 * j + 2] = -alphas[:, j] * xn[:, 1]
    _, sv, vt = np.linalg.svd(M.T @ M)
    if sv[0] == 0:
        raise DegenerateConfiguration("projection system is zero")
    max_null = 3 if planar else 4
    null_vecs = vt[::-1][:max_null]  # smallest singular values first

    pairs = list(combinations(range(n_ctrl), 2))
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    # dv[k, p] = difference of control points i, j of null vector k for pair p
    nv = null_vecs.reshape(max_null, n_ctrl, 3)
    dv = np.stack([nv[:, i] - nv[:, j] for i, j in pairs], axis=1)

    def products(n_null):
        cols = []
        for j in range(n_null):
            for i in range(j + 1):
                f = 1.0 if i == j else 2.0
                cols.append(f * np.einsum("pj,pj->p", dv[i], dv[j]))
        return np.stack(cols, axis=1)

    candidates = []
    for n_null in range(1, max_null + 1):
        L = products(n_null)
        if L.shape[1] <= len(pairs):
            B, *_ = np.linalg.lstsq(L, rho, rcond=None)
        else:
            # too many products: keep the B1j subset (4-vector case)
            sub = [j * (j + 1) // 2 for j in range(n_null)]
            Bs, *_ = np.linalg.lstsq(L[:, sub], rho, rcond=None)
            B = np.zeros(L.shape[1])
            B[sub] = Bs
        betas = _betas_from_products(B, n_null)
        if not np.any(betas):
            continue
        full = np.zeros(max_null)
        full[:n_null] = betas
        if gauss_newton:
            full[:n_null] = _gauss_newton_betas(betas, dv[:n_null], rho)
        try:
            candidates.append(_pose_from_betas(full, null_vecs, alphas, pw, xn, n_ctrl))
        except (np.linalg.LinAlgError, ValueError):
            continue
    if not candidates:
        raise DegenerateConfiguration("no EPnP solution")
    return min(candidates, key=lambda c: c[1])[0]


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def _needed_iterations(inlier_ratio, confidence, sample_size=4):
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0 or confidence >= 1.0:
        return math.inf
    denom = math.log(1.0 - inlier_ratio**sample_size)
    if denom == 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / denom)


def epnp_ransac(points_3d, pixels, cam: CameraModel, cfg: RansacConfig = RansacConfig()) -> RegistrationResult:
    """Robust EPnP over random 4-point samples.

    Iteration ``i`` draws its sample from an RNG seeded with ``(seed, i)``, so
    results do not depend on how iterations are scheduled.  The best
    hypothesis has the most inliers (ties: lower summed inlier error, then
    lower iteration index).  The final pose is re-estimated on the inliers
    until the inlier set stops changing.
    """
    pw = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pw)
    if n < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {n}")
    thr = cfg.reprojection_threshold
    best = None  # (count, err_sum, iteration, inlier mask)
    needed = cfg.max_iterations
    it = 0
    while it < min(cfg.max_iterations, needed):
        rng = np.random.default_rng([cfg.seed, it])
        sample = rng.choice(n, size=4, replace=False)
        it += 1
        try:
            hyp = epnp(pw[sample], uv[sample], cam)
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            continue
        err = _pixel_errors(hyp, pw, uv, cam)
        mask = err < thr
        count = int(mask.sum())
        key = (count, -float(err[mask].sum()))
        if best is None or key > best[0]:
            best = (key, mask)
            needed = _needed_iterations(count / n, cfg.confidence)

    if best is None or best[0][0] < 4:
        return RegistrationResult(None, iterations=it)
    mask = best[1]
    pose = None
    for _ in range(10):
        try:
            cand = epnp(pw[mask], uv[mask], cam)
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            break
        pose = cand
        new_mask = _pixel_errors(cand, pw, uv, cam) < thr
        if np.array_equal(new_mask, mask) or new_mask.sum() < 4:
            break
        mask = new_mask
    if pose is None:
        return RegistrationResult(None, iterations=it)
    inliers = np.flatnonzero(_pixel_errors(pose, pw, uv, cam) < thr)
    result = RegistrationResult(pose, inliers, camera=cam, iterations=it)
    if len(inliers) < cfg.min_inliers:
        result.pose = None
        return result
    if cfg.refine_focal:
        new_cam, new_pose, improved = refine_focal(pw[inliers], uv[inliers], cam, pose)
        if improved:
            result.camera, result.pose = new_cam, new_pose
            result.inlier_ids = np.flatnonzero(_pixel_errors(new_pose, pw, uv, new_cam) < thr)
    return result


def refine_focal(points_3d, pixels, cam: CameraModel, pose: Pose, lo: float = 0.5, hi: float = 2.0,
                 tol: float = 1e-6):
    """Golden-section search over a shared focal scale.

    Returns ``(camera, pose, improved)``; the inputs come back unchanged when
    there are fewer than 6 correspondences or nothing beats the start.
    """
    pw = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pw) < 6:
        return cam, pose, False

    def cost(scale):
        c = cam.scaled(scale)
        try:
            p = epnp(pw, uv, c)
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            return math.inf, c, None
        return float(np.mean(_pixel_errors(p, pw, uv, c))), c, p

    base = float(np.mean(_pixel_errors(pose, pw, uv, cam)))
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1, x2 = b - inv_phi * (b - a), a + inv_phi * (b - a)
    f1, f2 = cost(x1), cost(x2)
    while b - a > tol:
        if f1[0] <= f2[0]:
            b, x2, f2 = x2, x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = cost(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = cost(x2)
    best = f1 if f1[0] <= f2[0] else f2
    if best[2] is None or not best[0] < base:
        return cam, pose, False
    return best[1], best[2], True


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def euler_xyz(R) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (radians) with ``R = Rx(a) @ Ry(b) @ Rz(c)``.

    At gimbal lock the third angle is fixed to zero.
    """
    R = np.asarray(R, dtype=np.float64)
    b = math.asin(max(-1.0, min(1.0, R[0, 2])))
    if abs(abs(b) - math.pi / 2) < 1e-6 * math.pi / 180:
        return np.array([math.atan2(R[2, 1], R[1, 1]), b, 0.0])
    a = math.atan2(-R[1, 2], R[2, 2])
    c = math.atan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def registration_errors(pred: Pose, gt: Pose):
    """(RRE in degrees, RTE in meters).

    RRE sums the absolute intrinsic-XYZ Euler angles of ``R_gt^-1 R_pred``.
    """
    dR = gt.rotation.T @ pred.rotation
    rre = float(np.degrees(np.abs(euler_xyz(dR))).sum())
    rte = float(np.linalg.norm(gt.translation - pred.translation))
    return rre, rte


def registration_recall(results, cfg: EvalConfig = EvalConfig()) -> float:
    results = list(results)
    if not results:
        raise ValueError("no results")
    ok = sum(1 for r in results if r.rre < cfg.tau_r and r.rte < cfg.tau_t)
    return ok / len(results)


def summarize(results, cfg: EvalConfig = EvalConfig()) -> dict:
    """Median and mean RRE/RTE plus recall; failures count with inf error."""
    results = list(results)
    rre = np.array([r.rre for r in results], dtype=np.float64)
    rte = np.array([r.rte for r in results], dtype=np.float64)
    return {
        "count": len(results),
        "rr": registration_recall(results, cfg),
        "median_rre": float(np.median(rre)),
        "median_rte": float(np.median(rte)),
        "mean_rre": float(np.mean(rre)),
        "mean_rte": float(np.mean(rte)),
        "tau_r": cfg.tau_r,
        "tau_t": cfg.tau_t,
    }
