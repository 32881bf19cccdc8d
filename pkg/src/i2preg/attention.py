"""Fusion-transformer forward pass and geometry-guided attention supervision.

Parameters are plain ``{name: ndarray}`` dicts; nothing here trains.  Each
block runs per-modality self-attention and then image-to-point and
point-to-image cross-attention, all pre-norm residual:
``x + MHA(LN(x), LN(context))``.  Positional embeddings are added to queries
and keys only, so zero projection weights leave the features untouched.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .geom import CameraModel, Pose, angular_radius_matrix, patch_rays, point_ray_distance_matrix
from .grouping import GroupSet, PatchGrid
from .matching import bce_with_logits

LAYERS = ("self_img", "self_pts", "cross_i2p", "cross_p2i")
LN_EPS = 1e-5


@dataclass(frozen=True)
class FusionConfig:
    n_blocks: int = 4
    n_heads: int = 4
    channels: int = 256
    latent_dim: int = 256
    per_head_gal: bool = False  # supervise every head instead of the head mean

    def __post_init__(self):
        if min(self.n_blocks, self.n_heads, self.channels, self.latent_dim) < 1:
            raise ValueError("fusion sizes must be >= 1")
        if self.channels % self.n_heads or self.latent_dim % self.n_heads:
            raise ValueError("channels and latent_dim must be divisible by n_heads")


class Direction(enum.Enum):
    I2P = "i2p"
    P2I = "p2i"


@dataclass
class AttentionMap:
    logits: np.ndarray  # raw, pre-softmax
    direction: Direction


class Label(enum.IntEnum):
    UNSUPERVISED = -1
    NEGATIVE = 0
    POSITIVE = 1


@dataclass
class TriMask:
    labels: np.ndarray  # int8 of Label values

    def count(self, label: Label) -> int:
        return int(np.count_nonzero(self.labels == label))


@dataclass(frozen=True)
class GalConfig:
    theta_low: float = 10.0  # degrees
    theta_up: float = 20.0
    d_low: float = 3.0       # meters
    d_up: float = 5.0

    def __post_init__(self):
        if not (0 < self.theta_low <= self.theta_up):
            raise ValueError("need 0 < theta_low <= theta_up")
        if not (0 < self.d_low <= self.d_up):
            raise ValueError("need 0 < d_low <= d_up")


@dataclass
class FusionOutput:
    f_img: np.ndarray
    f_pts: np.ndarray
    map_i2p: AttentionMap
    map_p2i: AttentionMap
    probs_i2p: np.ndarray  # (heads, patches, groups) softmax weights of the last block
    probs_p2i: np.ndarray
    head_logits_i2p: np.ndarray  # (heads, patches, groups)
    head_logits_p2i: np.ndarray


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: FusionConfig) -> dict:
    C, D = cfg.channels, cfg.latent_dim
    shapes = {}
    for b in range(cfg.n_blocks):
        for layer in LAYERS:
            p = f"block{b}.{layer}."
            shapes[p + "wq"] = (C, D)
            shapes[p + "wk"] = (C, D)
            shapes[p + "wv"] = (C, D)
            shapes[p + "wo"] = (D, C)
            for side in ("q", "kv"):
                shapes[p + f"ln_{side}_g"] = (C,)
                shapes[p + f"ln_{side}_b"] = (C,)
    return shapes


def init_params(cfg: FusionConfig, seed: int = 0, scale: float | None = None,
                output_scale: float = 1.0) -> dict:
    """Seeded Gaussian projections (std ``1/sqrt(C)`` by default), identity layer norms.

    ``output_scale`` multiplies the output projections only; a small value
    keeps the residual stream close to its input while the attention logits
    keep their full spread.
    """
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(cfg.channels) if scale is None else scale
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * std
            if name.endswith(".wo"):
                params[name] *= output_scale
    return params


def zero_params(cfg: FusionConfig) -> dict:
    params = init_params(cfg, 0, scale=0.0)
    return params


def save_param_blob(path, params: dict) -> None:
    """Little-endian float32 blob preceded by a JSON header of names and shapes.

    Layout: ``uint32 header_len`` | UTF-8 JSON ``{"tensors": [{"name", "shape"}]}`` | data.
    """
    names = sorted(params)
    header = json.dumps({"tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names]},
                        separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.asarray(params[n], dtype="<f4").tobytes())


def load_param_blob(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen].decode())
    offset = 4 + hlen
    out = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(t["shape"])
        out[t["name"]] = arr.astype(np.float64)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError("parameter blob has trailing bytes")
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def sinusoidal_embedding(positions, channels: int, bands: int | None = None, base: float = 10000.0):
    """Sin/cos features of each coordinate axis, zero-padded to ``channels``."""
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n, axes = pos.shape
    if bands is None:
        bands = channels // (2 * axes)
    freqs = base ** (-np.arange(bands) / max(bands, 1))
    parts = []
    for a in range(axes):
        ang = pos[:, a:a + 1] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    emb = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))
    out = np.zeros((n, channels))
    out[:, :min(channels, emb.shape[1])] = emb[:, :channels]
    return out


def patch_positions(grid: PatchGrid) -> np.ndarray:
    return grid.coords().astype(np.float64)


def group_positions(centers, scale: float = 100.0) -> np.ndarray:
    """Group centres normalised into the unit cube, then scaled for the embedding."""
    c = np.asarray(centers, dtype=np.float64)
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = np.max(hi - lo)
    if span == 0:
        return np.zeros_like(c)
    return (c - lo) / span * scale


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _attention(x_q, x_kv, pos_q, pos_kv, params, prefix, cfg: FusionConfig, self_attn: bool):
    g = params
    q_in = layer_norm(x_q, g[prefix + "ln_q_g"], g[prefix + "ln_q_b"])
    if self_attn:
        kv_in = q_in
    else:
        kv_in = layer_norm(x_kv, g[prefix + "ln_kv_g"], g[prefix + "ln_kv_b"])
    Q = (q_in + pos_q) @ g[prefix + "wq"]
    K = (kv_in + pos_kv) @ g[prefix + "wk"]
    V = kv_in @ g[prefix + "wv"]
    h = cfg.n_heads
    dh = cfg.latent_dim // h
    Qh = Q.reshape(len(Q), h, dh).transpose(1, 0, 2)
    Kh = K.reshape(len(K), h, dh).transpose(1, 0, 2)
    Vh = V.reshape(len(V), h, dh).transpose(1, 0, 2)
    raw = Qh @ Kh.transpose(0, 2, 1)  # (h, nq, nk)
    probs = _softmax(raw / np.sqrt(cfg.latent_dim), axis=-1)
    out = (probs @ Vh).transpose(1, 0, 2).reshape(len(Q), cfg.latent_dim) @ g[prefix + "wo"]
    return x_q + out, raw, probs


def fusion_forward(f_img, f_pts, params: dict, cfg: FusionConfig, img_pos=None, pts_pos=None) -> FusionOutput:
    """Run ``cfg.n_blocks`` fusion blocks.

    ``img_pos``/``pts_pos`` are raw positions (patch (row, col), normalised
    group xyz) turned into sinusoidal embeddings; ``None`` disables them.
    The returned maps are the last block's head-averaged raw logits.
    """
    f_img = np.asarray(f_img, dtype=np.float64)
    f_pts = np.asarray(f_pts, dtype=np.float64)
    C = cfg.channels
    if f_img.ndim != 2 or f_pts.ndim != 2 or f_img.shape[1] != C or f_pts.shape[1] != C:
        raise ValueError(f"features must be (n, {C})")
    missing = set(param_shapes(cfg)) - set(params)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)[:3]}...")
    pe_img = np.zeros_like(f_img) if img_pos is None else sinusoidal_embedding(img_pos, C)
    pe_pts = np.zeros_like(f_pts) if pts_pos is None else sinusoidal_embedding(pts_pos, C)
    if len(pe_img) != len(f_img) or len(pe_pts) != len(f_pts):
        raise ValueError("positions do not match feature rows")

    raw_i2p = raw_p2i = probs_i2p = probs_p2i = None
    for b in range(cfg.n_blocks):
        p = f"block{b}."
        f_img, _, _ = _attention(f_img, f_img, pe_img, pe_img, params, p + "self_img.", cfg, True)
        f_pts, _, _ = _attention(f_pts, f_pts, pe_pts, pe_pts, params, p + "self_pts.", cfg, True)
        new_img, raw_i2p, probs_i2p = _attention(f_img, f_pts, pe_img, pe_pts, params, p + "cross_i2p.", cfg, False)
        new_pts, raw_p2i, probs_p2i = _attention(f_pts, f_img, pe_pts, pe_img, params, p + "cross_p2i.", cfg, False)
        f_img, f_pts = new_img, new_pts
    return FusionOutput(f_img, f_pts,
                        AttentionMap(raw_i2p.mean(axis=0), Direction.I2P),
                        AttentionMap(raw_p2i.mean(axis=0), Direction.P2I),
                        probs_i2p, probs_p2i, raw_i2p, raw_p2i)


# ---------------------------------------------------------------------------
# geometry-guided attention loss
# ---------------------------------------------------------------------------

def _tri(values, low, up):
    labels = np.full(values.shape, Label.UNSUPERVISED, dtype=np.int8)
    labels[values < low] = Label.POSITIVE
    labels[values > up] = Label.NEGATIVE
    return TriMask(labels)


def gal_masks(cam: CameraModel, pose: Pose, grid: PatchGrid, groups: GroupSet, cfg: GalConfig = GalConfig()):
    """Indicator masks for I2P (angular radius) and P2I (point-to-ray distance).

    ``cam`` must be at the grid's resolution.  Returns ``(mask_i2p, mask_p2i)``
    with shapes (patches, groups) and (groups, patches).
    """
    centers = np.asarray(groups.centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        return TriMask(np.zeros((grid.num_patches, 0), np.int8)), TriMask(np.zeros((0, grid.num_patches), np.int8))
    origin, dirs = patch_rays(cam, pose, grid.patch_size_s, grid.coords())
    rad = np.degrees(angular_radius_matrix(origin, dirs, centers))
    dist = point_ray_distance_matrix(origin, dirs, centers)
    return _tri(rad, cfg.theta_low, cfg.theta_up), _tri(dist, cfg.d_low, cfg.d_up)


def _masked_bce(logits, mask: TriMask):
    x = np.asarray(logits, dtype=np.float64)
    lab = mask.labels
    if x.shape != lab.shape:
        raise ValueError(f"logit shape {x.shape} does not match mask {lab.shape}")
    sup = lab != Label.UNSUPERVISED
    loss, grad = bce_with_logits(x, np.where(sup, lab, 0))
    loss = np.where(sup, loss, 0.0)
    grad = np.where(sup, grad, 0.0)
    return float(loss.sum()), grad


def gal_loss(map_i2p, map_p2i, masks):
    """Summed BCE over supervised entries in both directions.

    Accepts :class:`AttentionMap` or raw arrays.  Per-head logits of shape
    (heads, rows, cols) are supervised head by head.  Returns
    ``(loss, grad_i2p, grad_p2i)``.
    """
    li = getattr(map_i2p, "logits", map_i2p)
    lp = getattr(map_p2i, "logits", map_p2i)
    mi, mp = masks
    li, lp = np.asarray(li, dtype=np.float64), np.asarray(lp, dtype=np.float64)
    if li.ndim == 3:
        mi = TriMask(np.broadcast_to(mi.labels, li.shape))
        mp = TriMask(np.broadcast_to(mp.labels, lp.shape))
    loss_i, g_i = _masked_bce(li, mi)
    loss_p, g_p = _masked_bce(lp, mp)
    return loss_i + loss_p, g_i, g_p
