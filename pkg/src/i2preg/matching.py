"""Coarse-to-fine point-to-pixel matching and the matching losses.

Soft-argmax results are (row, col) grid coordinates.  Correspondence pixels
are (u, v) = (col, row) in full-resolution image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from .geom import CameraModel, Pose, project_points
from .grouping import GroupSet, PatchGrid, patches_of_pixels
from .types import CorrespondenceSet, FeatureSet

__all__ = [
    "FeatureSet", "CorrespondenceSet", "LossConfig", "MatchConfig", "SimilarityMap", "TrainingPairs",
    "cosine_similarity_matrix", "normalize_rows", "superpoint_filter", "frustum_labels", "bce_with_logits",
    "detection_loss", "sample_training_pairs", "pair_similarities", "icl_loss", "soft_argmax",
    "soft_argmax_grad", "window_soft_argmax", "dta_loss", "coarse_match", "extract_fine_window",
    "fine_match", "fine_losses", "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 10.0
    m_p: float = 0.2
    m_n: float = 1.8
    safe_radius_r: int = 1
    kappa: int = 128
    fine_window_w: int = 8
    lambda_att: float = 1.0
    lambda_det: float = 1.0
    lambda_coarse: float = 1.0
    lambda_fine: float = 1.0
    icl_mode: str = "literal"      # or "circle": negative optimum at -m_n_circle
    m_n_circle: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.fine_window_w < 2 or self.fine_window_w % 2:
            raise ValueError("fine_window_w must be even and >= 2")
        if self.icl_mode not in ("literal", "circle"):
            raise ValueError(f"unknown icl_mode {self.icl_mode!r}")


@dataclass(frozen=True)
class MatchConfig:
    """Inference-time matching knobs."""

    superpoint_threshold: float = 0.9
    coarse_window: int = 5
    coarse_temperature: float = 1.0
    fine_window_w: int = 8
    fine_temperature: float = 1.0


@dataclass
class SimilarityMap:
    values: np.ndarray
    origin: tuple = (0.0, 0.0)  # (row, col) of entry [0, 0]


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm feature row")
    return x / n


def cosine_similarity_matrix(a, b) -> np.ndarray:
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# in-frustum filter
# ---------------------------------------------------------------------------

def frustum_labels(cam: CameraModel, pose: Pose, centers) -> np.ndarray:
    return project_points(cam, pose, np.asarray(centers, dtype=np.float64))[2]


def superpoint_filter(scores, threshold: float = 0.9, *, cam=None, pose=None, centers=None):
    """Ids with ``score > threshold``, plus geometric labels when a camera is given.

    Returns ``(kept_ids, labels)``; ``labels`` is ``None`` without geometry.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("scores must be probabilities")
    kept = np.flatnonzero(scores > threshold)
    labels = None
    if cam is not None:
        labels = frustum_labels(cam, pose, centers)
    return kept, labels


def bce_with_logits(x, y):
    """Element-wise BCE(sigmoid(x), y) and its derivative wrt ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return loss, expit(x) - y


def detection_loss(logits, labels):
    """Mean BCE over groups; returns ``(loss, d loss / d logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        return 0.0, np.zeros(0)
    loss, g = bce_with_logits(logits, np.asarray(labels, dtype=np.float64))
    n = logits.size
    return float(loss.sum() / n), g / n


# ---------------------------------------------------------------------------
# training pairs and ICL
# ---------------------------------------------------------------------------

@dataclass
class TrainingPairs:
    """Pairs among ``kappa`` sampled ground-truth (group, patch) matches.

    All arrays hold index pairs.  ``pos`` is (group, flat patch); negatives
    are cross-modal (group, patch), image-image (patch, patch) and
    point-point (group, group).
    """

    pos: np.ndarray
    neg_cross: np.ndarray
    neg_image: np.ndarray
    neg_points: np.ndarray
    sampled: np.ndarray  # indices into the ground-truth set


def sample_training_pairs(gt: CorrespondenceSet, grid: PatchGrid, kappa: int, safe_radius_r: int,
                          seed: int = 0) -> TrainingPairs:
    """Sample ``kappa`` positives and the negatives they induce.

    Two sampled items form a negative when their ground-truth patches are
    more than ``safe_radius_r`` apart (Chebyshev distance on the patch grid).
    If fewer than ``kappa`` positives exist they are drawn with replacement.
    """
    if len(gt) == 0:
        raise ValueError("ground-truth set is empty")
    rng = np.random.default_rng(seed)
    sel = rng.choice(len(gt), size=kappa, replace=kappa > len(gt))
    patches = patches_of_pixels(grid, gt.pixels[sel])
    flat = grid.flat(patches[:, 0], patches[:, 1])
    groups = gt.group_ids[sel]
    cheb = np.abs(patches[:, None, :] - patches[None, :, :]).max(-1)
    far = cheb > safe_radius_r
    a, b = np.nonzero(far)
    upper = a < b
    pos = np.stack([groups, flat], axis=1)
    neg_cross = np.unique(np.stack([groups[a], flat[b]], axis=1), axis=0)
    neg_image = np.unique(np.stack([flat[a[upper]], flat[b[upper]]], axis=1), axis=0)
    neg_points = np.unique(np.stack([groups[a[upper]], groups[b[upper]]], axis=1), axis=0)
    empty = np.zeros((0, 2), dtype=np.int64)
    return TrainingPairs(pos, neg_cross if len(a) else empty, neg_image if len(a) else empty,
                         neg_points if len(a) else empty, sel)


def pair_similarities(features: FeatureSet, pairs: TrainingPairs):
    """Cosine similarities for the positive and (all three kinds of) negative pairs."""
    img = normalize_rows(features.coarse_image)
    pts = normalize_rows(features.coarse_points)

    def dots(x, y, idx):
        if len(idx) == 0:
            return np.zeros(0)
        return np.clip(np.einsum("ij,ij->i", x[idx[:, 0]], y[idx[:, 1]]), -1.0, 1.0)

    s_pos = dots(pts, img, pairs.pos)
    s_neg = np.concatenate([dots(pts, img, pairs.neg_cross), dots(img, img, pairs.neg_image),
                            dots(pts, pts, pairs.neg_points)])
    return s_pos, s_neg


def icl_weights(s_pos, s_neg, cfg: LossConfig):
    """Adaptive weights and exponent offsets ``(alpha_p, alpha_n, off_p, off_n)``.

    The exponents are ``alpha_p * (off_p - s_p)`` and ``alpha_n * (s_n - off_n)``.
    """
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    alpha_p = cfg.gamma * np.maximum(0.0, 1.0 + cfg.m_p - s_pos)
    if cfg.icl_mode == "circle":
        alpha_n = cfg.gamma * np.maximum(0.0, s_neg + cfg.m_n_circle)
        off_n = cfg.m_n_circle
    else:
        alpha_n = cfg.gamma * np.maximum(0.0, s_neg - cfg.m_n)
        off_n = cfg.m_n
    return alpha_p, alpha_n, 1.0 + cfg.m_p, off_n


def icl_loss(s_pos, s_neg, cfg: LossConfig, alpha_pos=None, alpha_neg=None):
    """Inter-intra contrastive loss on pair similarities.

    ``log(1 + sum_j exp(a_p^j (1 - s_p^j + m_p)) * sum_k exp(a_n^k (s_n^k - m_n)))``
    evaluated as a softplus of two log-sum-exps.  The adaptive weights are
    treated as constants in the gradient; pass ``alpha_pos``/``alpha_neg`` to
    pin them (finite-difference checks do this).

    Returns ``(loss, grad_pos, grad_neg)``.
    """
    s_pos = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    s_neg = np.asarray(s_neg, dtype=np.float64).reshape(-1)
    if len(s_pos) == 0 or len(s_neg) == 0:
        return 0.0, np.zeros_like(s_pos), np.zeros_like(s_neg)
    a_p, a_n, off_p, off_n = icl_weights(s_pos, s_neg, cfg)
    if alpha_pos is not None:
        a_p = np.asarray(alpha_pos, dtype=np.float64)
    if alpha_neg is not None:
        a_n = np.asarray(alpha_neg, dtype=np.float64)
    e_p = a_p * (off_p - s_pos)
    e_n = a_n * (s_neg - off_n)
    lse_p, lse_n = logsumexp(e_p), logsumexp(e_n)
    z = lse_p + lse_n
    loss = float(np.logaddexp(0.0, z))
    sz = expit(z)
    g_pos = -sz * np.exp(e_p - lse_p) * a_p
    g_neg = sz * np.exp(e_n - lse_n) * a_n
    return loss, g_pos, g_neg


# ---------------------------------------------------------------------------
# soft-argmax
# ---------------------------------------------------------------------------

def _grid_coords(shape):
    rr, cc = np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64),
                         indexing="ij")
    return rr, cc


def _softmax2d(values, temperature):
    v = np.asarray(values, dtype=np.float64) / temperature
    p = np.exp(v - v.max())
    return p / p.sum()


def soft_argmax(smap: SimilarityMap, temperature: float = 1.0) -> np.ndarray:
    """Expected (row, col) under ``softmax(values / temperature)``, plus the map origin."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    values = np.asarray(smap.values)
    if values.size == 0:
        raise ValueError("empty similarity map")
    p = _softmax2d(values, temperature)
    rr, cc = _grid_coords(values.shape)
    return np.array([(p * rr).sum() + smap.origin[0], (p * cc).sum() + smap.origin[1]])


def soft_argmax_grad(smap: SimilarityMap, temperature: float, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`soft_argmax` wrt the map values."""
    values = np.asarray(smap.values)
    p = _softmax2d(values, temperature)
    rr, cc = _grid_coords(values.shape)
    mr, mc = (p * rr).sum(), (p * cc).sum()
    g = np.asarray(upstream, dtype=np.float64)
    return p * ((rr - mr) * g[0] + (cc - mc) * g[1]) / temperature


def _window_soft_argmax_batch(values, window: int, temperature: float):
    """Window soft-argmax for a stack of maps ``(G, R, C)``; returns (G, 2)."""
    g, rows, cols = values.shape
    flat_arg = np.argmax(values.reshape(g, -1), axis=1)  # lowest linear index on ties
    r0, c0 = np.divmod(flat_arg, cols)
    h = window // 2
    off = np.arange(-h, h + 1)
    rr = r0[:, None, None] + off[None, :, None]
    cc = c0[:, None, None] + off[None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    valid = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
    vals = values[np.arange(g)[:, None, None], np.clip(rr, 0, rows - 1), np.clip(cc, 0, cols - 1)]
    logits = np.where(valid, vals / temperature, -np.inf)
    logits -= logits.max(axis=(1, 2), keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=(1, 2), keepdims=True)
    return np.stack([(p * rr).sum(axis=(1, 2)), (p * cc).sum(axis=(1, 2))], axis=1)


def window_soft_argmax(smap: SimilarityMap, window: int = 5, temperature: float = 1.0) -> np.ndarray:
    """Argmax, then soft-argmax over the ``window x window`` neighbourhood.

    The neighbourhood is truncated at the map border, never shifted.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    values = np.asarray(smap.values, dtype=np.float64)
    rc = _window_soft_argmax_batch(values[None], window, temperature)[0]
    return rc + np.asarray(smap.origin, dtype=np.float64)


def _l2_sum(pred, target):
    diff = np.asarray(pred, dtype=np.float64).reshape(-1, 2) - np.asarray(target, dtype=np.float64).reshape(-1, 2)
    norms = np.linalg.norm(diff, axis=1)
    grad = np.zeros_like(diff)
    nz = norms > 0
    grad[nz] = diff[nz] / norms[nz, None]
    return float(norms.sum()), grad


def dta_loss(pred, target):
    """Sum of Euclidean distances; returns ``(loss, d loss / d pred)``."""
    if len(pred) != len(target):
        raise ValueError("pred and target lengths differ")
    return _l2_sum(pred, target)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def coarse_match(features: FeatureSet, kept_groups, grid: PatchGrid, groups: GroupSet,
                 temperature: float = 1.0, window: int = 5) -> CorrespondenceSet:
    """Coarse pixel per kept group from its patch similarity map."""
    kept = np.asarray(kept_groups, dtype=np.int64)
    if len(kept) == 0:
        raise ValueError("no groups to match")
    sims = cosine_similarity_matrix(features.coarse_points[kept], features.coarse_image)
    maps = sims.reshape(len(kept), grid.rows, grid.cols)
    rc = _window_soft_argmax_batch(maps, window, temperature)
    s = grid.patch_size_s
    pixels = np.stack([(rc[:, 1] + 0.5) * s - 0.5, (rc[:, 0] + 0.5) * s - 0.5], axis=1)
    conf = (sims.max(axis=1) + 1.0) / 2.0
    return CorrespondenceSet(groups.center_indices[kept], groups.centers[kept], pixels,
                             np.clip(conf, 0.0, 1.0), kept)


def extract_fine_window(fine_image, center_rc, w: int, shift=(0, 0)):
    """``w x w`` block of the fine map centred at ``center_rc`` (+ ``shift``).

    The block is moved, not padded, to stay inside the map.  Returns
    ``(block, (row0, col0))``.
    """
    fh, fw = fine_image.shape[:2]
    if w > fh or w > fw:
        raise ValueError("window larger than the fine map")
    r0 = int(np.floor(center_rc[0] + shift[0] - (w - 1) / 2.0 + 0.5))
    c0 = int(np.floor(center_rc[1] + shift[1] - (w - 1) / 2.0 + 0.5))
    r0 = min(max(r0, 0), fh - w)
    c0 = min(max(c0, 0), fw - w)
    return fine_image[r0:r0 + w, c0:c0 + w], (r0, c0)


def fine_match(features: FeatureSet, coarse: CorrespondenceSet, w: int = 8, temperature: float = 1.0):
    """Refine coarse pixels with soft-argmax over a ``w x w`` fine window.

    Fine map cell ``k`` is centred on full-resolution pixel ``2k + 0.5``.
    Returns ``(correspondences, n_skipped)``; pairs whose point has no usable
    fine descriptor (zero or non-finite row) are skipped.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    fine_img = features.fine_image
    fh, fw = fine_img.shape[:2]
    if w > fh or w > fw:
        raise ValueError("window larger than the fine map")
    f_pts = np.asarray(features.fine_points[coarse.point_index], dtype=np.float64).reshape(len(coarse), -1)
    usable = np.all(np.isfinite(f_pts), axis=1) & np.any(f_pts != 0, axis=1)
    keep = np.flatnonzero(usable)
    out = coarse.subset(keep)
    if len(keep) == 0:
        return out, len(coarse)
    # same placement rule as extract_fine_window, for every pair at once
    u, v = out.pixels[:, 0], out.pixels[:, 1]
    r0 = np.floor((v - 0.5) / 2.0 - (w - 1) / 2.0 + 0.5).astype(np.int64).clip(0, fh - w)
    c0 = np.floor((u - 0.5) / 2.0 - (w - 1) / 2.0 + 0.5).astype(np.int64).clip(0, fw - w)
    off = np.arange(w)
    blocks = fine_img[(r0[:, None] + off)[:, :, None], (c0[:, None] + off)[:, None, :]]
    sims = np.einsum("krcd,kd->krc", blocks.astype(np.float64), f_pts[keep])
    logits = sims.reshape(len(keep), -1) / temperature
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p = p.reshape(len(keep), w, w)
    r = (p.sum(axis=2) * off).sum(axis=1) + r0
    c = (p.sum(axis=1) * off).sum(axis=1) + c0
    out.pixels = np.stack([2.0 * c + 0.5, 2.0 * r + 0.5], axis=1)
    return out, len(coarse) - len(keep)


def fine_losses(fine_maps, gt_pixels_in_window, pred_pixels):
    """Fine cross-entropy and L2 losses.

    ``fine_maps`` are ``w x w`` logit maps, ``gt_pixels_in_window`` and
    ``pred_pixels`` continuous (row, col) in window coordinates; the
    cross-entropy target cell is the one containing the ground truth.

    Returns ``(ce, l2, grad_maps, grad_pred)``.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in fine_maps]
    gt = np.asarray(gt_pixels_in_window, dtype=np.float64).reshape(-1, 2)
    kappa = len(maps)
    if kappa == 0:
        return 0.0, 0.0, [], np.zeros((0, 2))
    ce = 0.0
    grads = []
    for m, (r, c) in zip(maps, gt):
        w_r, w_c = m.shape
        cell = (int(np.floor(r + 0.5)), int(np.floor(c + 0.5)))
        if not (0 <= cell[0] < w_r and 0 <= cell[1] < w_c):
            raise ValueError(f"ground-truth pixel ({r}, {c}) outside the fine window")
        logp = log_softmax(m.ravel())
        k = cell[0] * w_c + cell[1]
        ce -= logp[k]
        g = np.exp(logp)
        g[k] -= 1.0
        grads.append((g / kappa).reshape(m.shape))
    l2, g_pred = _l2_sum(pred_pixels, gt)
    return ce / kappa, l2, grads, g_pred


def total_loss(l_att, l_det, l_coarse, l_fine, cfg: LossConfig) -> float:
    """Weighted joint loss; ``l_coarse``/``l_fine`` may be (S, D) pairs."""
    def _sum(x):
        return float(np.sum(x))
    return (cfg.lambda_att * _sum(l_att) + cfg.lambda_det * _sum(l_det)
            + cfg.lambda_coarse * _sum(l_coarse) + cfg.lambda_fine * _sum(l_fine))
