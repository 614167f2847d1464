"""Sparse attention over a single-scale feature map.

Box-attention refines one reference window per head and attends over a
2x2 grid sampled inside it.  Fixed-scale attention hands out anchors of m
sizes to the heads round-robin; adaptive-scale attention gives every head
all m anchors, damps each anchor's offsets by its scale temperature
2^j / lambda, and mixes the m per-scale features with softmax weights
predicted from the query.  Masked instance-attention samples a dense grid,
shares one score per quadrant bin, and masks cells the previous decoder
layer called background.

Windows are normalized [cx, cy, w, h]; (0, 0) is the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Parameter, Tensor, ops
from .params import linear_params, xavier

MASK_NEG = -1e9


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Square anchors of side base_size * 2^j pixels, j = 0..scales-1."""

    base_size: float
    scales: int
    image_size: int

    def __post_init__(self):
        if self.scales < 1:
            raise AttentionConfigError(f"scale count must be >= 1, got {self.scales}")
        if self.base_size <= 0 or self.image_size <= 0:
            raise AttentionConfigError("anchor base size and image size must be positive")

    @property
    def sizes(self) -> np.ndarray:
        return self.base_size * 2.0 ** np.arange(self.scales) / self.image_size


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    scales: int = 1
    temperature_denominator: float | None = None
    grid: int = 2
    share_scale_offsets: bool = False
    min_size_texels: float = 1.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise AttentionConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.scales < 1:
            raise AttentionConfigError(f"scale count must be >= 1, got {self.scales}")
        if self.grid < 1:
            raise AttentionConfigError(f"grid size must be >= 1, got {self.grid}")
        if self.temperature_denominator is not None and self.temperature_denominator <= 0:
            raise AttentionConfigError("temperature denominator must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def lam(self) -> float:
        if self.temperature_denominator is None:
            return float(2 ** (self.scales - 1))
        return float(self.temperature_denominator)

    def temperatures(self) -> np.ndarray:
        return 2.0 ** np.arange(self.scales) / self.lam


def head_scale_assignment(heads: int, scales: int) -> np.ndarray:
    """Round-robin map head i -> anchor scale i mod m."""
    if scales < 1 or heads % scales:
        raise AttentionConfigError(f"{heads} heads cannot be split evenly over {scales} scales")
    return np.arange(heads) % scales


# ---------------------------------------------------------------------------
# window geometry
# ---------------------------------------------------------------------------

def refine_window(window, offsets, temperature=1.0, min_size=None):
    """[x + dx*t, y + dy*t, w + dw*t, h + dh*t], sizes clamped to min_size.

    Works on Tensors (differentiable) or plain arrays.  ``offsets`` are in
    normalized image units; callers wanting window-relative offsets scale
    them by the source window's size first.
    """
    if isinstance(window, Tensor) or isinstance(offsets, Tensor):
        if not isinstance(offsets, Tensor):
            offsets = Tensor(offsets)
        if not np.all(np.isfinite(offsets.data)):
            raise ValueError("non-finite window offsets")
        refined = ops.add(window, ops.mul(offsets, temperature))
        if min_size is None:
            return refined
        lo = np.concatenate([np.full(2, -np.inf), np.broadcast_to(np.asarray(min_size, float), (2,))])
        return ops.clamp_min(refined, lo)
    offsets = np.asarray(offsets, dtype=float)
    if not np.all(np.isfinite(offsets)):
        raise ValueError("non-finite window offsets")
    refined = np.asarray(window, dtype=float) + offsets * temperature
    if min_size is not None:
        refined = refined.copy()
        refined[..., 2:] = np.maximum(refined[..., 2:], min_size)
    return refined


def grid_fractions(grid: int) -> np.ndarray:
    """Row-major cell-center offsets of a grid x grid lattice, relative to the
    window center in units of the window size: shape [grid^2, 2] (x, y)."""
    c = (np.arange(grid) + 0.5) / grid - 0.5
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def grid_points(windows, grid: int):
    """Sample positions [..., grid^2, 2] for windows [..., 4]."""
    frac = grid_fractions(grid)
    if isinstance(windows, Tensor):
        lead = windows.shape[:-1]
        centers = ops.index(windows, (Ellipsis, slice(0, 2))).reshape(*lead, 1, 2)
        sizes = ops.index(windows, (Ellipsis, slice(2, 4))).reshape(*lead, 1, 2)
        return centers + sizes * frac
    windows = np.asarray(windows, dtype=float)
    return windows[..., None, :2] + windows[..., None, 2:] * frac


def sample_grid(feature_map, window, grid: int) -> Tensor:
    """Bilinear samples at the cell centers of a grid spanning ``window``."""
    if grid < 1:
        raise AttentionConfigError(f"grid size must be >= 1, got {grid}")
    w = window if isinstance(window, Tensor) else np.asarray(window, dtype=float)
    wd = w.data if isinstance(w, Tensor) else w
    if np.any(wd[..., 2:] <= 0):
        raise ValueError("degenerate window: width and height must be positive")
    return ops.bilinear_sample(feature_map, grid_points(w, grid))


def texel_size(feature_map) -> np.ndarray:
    h, w = feature_map.shape[:2]
    return np.array([1.0 / w, 1.0 / h])


def texel_centers(h: int, w: int) -> np.ndarray:
    """Normalized centers of every texel, row-major: [h*w, 2]."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_box_attention(rng: np.random.Generator, cfg: AttentionConfig, mechanism: str = "box") -> dict[str, Parameter]:
    d, n, m, g2 = cfg.dim, cfg.heads, cfg.scales, cfg.grid**2
    params: dict[str, Parameter] = {}
    if mechanism == "adaptive":
        per_head = 4 if cfg.share_scale_offsets else 4 * m
    else:
        per_head = 4
    params.update({f"offset.{k}": v for k, v in linear_params(rng, d, n * per_head, zero=True).items()})
    params.update({f"value.{k}": v for k, v in linear_params(rng, d, d).items()})
    params["relpos"] = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, g2, d)))
    if mechanism == "adaptive":
        params.update({f"scale.{k}": v for k, v in linear_params(rng, d, n * m, zero=True).items()})
    params.update({f"out.{k}": v for k, v in linear_params(rng, d, d).items()})
    return params


def init_masked_instance_attention(rng: np.random.Generator, cfg: AttentionConfig) -> dict[str, Parameter]:
    d, n = cfg.dim, cfg.heads
    params: dict[str, Parameter] = {}
    params.update({f"offset.{k}": v for k, v in linear_params(rng, d, 4, zero=True).items()})
    params.update({f"value.{k}": v for k, v in linear_params(rng, d, d).items()})
    params.update({f"bins.{k}": v for k, v in linear_params(rng, d, n * 4).items()})
    params["bins.w"].data *= 0.1
    params.update({f"out.{k}": v for k, v in linear_params(rng, d, d).items()})
    return params


def init_self_attention(rng: np.random.Generator, cfg: AttentionConfig) -> dict[str, Parameter]:
    d = cfg.dim
    return {
        "qkv.w": Parameter(xavier(rng, d, d, shape=(d, 3 * d))),
        "qkv.b": Parameter(np.zeros(3 * d)),
        "out.w": Parameter(xavier(rng, d, d)),
        "out.b": Parameter(np.zeros(d)),
    }


# ---------------------------------------------------------------------------
# shared 2x2-grid attention core
# ---------------------------------------------------------------------------

def _grid_attend(feature_map, queries, anchors, raw_offsets, temperatures, cfg, params, trace):
    """Per-(head, scale) features from windows anchored at ``anchors``.

    anchors: array [Q, n, S, 4]; raw_offsets: Tensor [Q, n, S, 4] relative to
    anchor size; temperatures: array [S].  Returns Tensor [Q, n, S, d_h].
    """
    q_count, n, s_count = anchors.shape[:3]
    h, w = feature_map.shape[:2]
    dh, g2 = cfg.head_dim, cfg.grid**2
    size_scale = np.concatenate([anchors[..., 2:], anchors[..., 2:]], axis=-1)
    temps = np.asarray(temperatures, dtype=float).reshape(1, 1, s_count, 1)
    offsets = ops.mul(raw_offsets, size_scale)
    min_size = cfg.min_size_texels * texel_size(feature_map)
    windows = refine_window(anchors, offsets, temps, min_size=min_size)
    points = grid_points(windows, cfg.grid)  # [Q, n, S, g2, 2]

    value = ops.linear(feature_map, params["value.w"], params["value.b"]).reshape(h, w, n, dh)
    pts = points.transpose(0, 2, 3, 1, 4)  # [Q, S, g2, n, 2]
    sampled = ops.bilinear_sample(value, pts).transpose(0, 3, 1, 2, 4)  # [Q, n, S, g2, dh]

    relpos = params["relpos"]
    scores = ops.matmul(queries, relpos.reshape(n * g2, cfg.dim).transpose()).reshape(q_count, n, 1, g2)
    alpha = ops.softmax(scores, axis=-1)
    feats = ops.sum(ops.mul(alpha.reshape(q_count, n, 1, g2, 1), sampled), axis=3)
    if trace is not None:
        trace["windows"] = windows.data
        trace["points"] = points.data
        trace["grid_weights"] = np.broadcast_to(alpha.data, (q_count, n, s_count, g2)).copy()
    return feats


def _project_out(heads: Tensor, params) -> Tensor:
    q_count = heads.shape[0]
    return ops.linear(heads.reshape(q_count, -1), params["out.w"], params["out.b"])


def _as_windows(windows, q_count) -> np.ndarray:
    windows = windows.data if isinstance(windows, Tensor) else np.asarray(windows, dtype=float)
    if windows.shape != (q_count, 4):
        raise AttentionConfigError(f"expected windows [{q_count}, 4], got {windows.shape}")
    return windows


def _check_inputs(feature_map, queries, cfg):
    if feature_map.ndim != 3 or feature_map.shape[-1] != cfg.dim:
        raise AttentionConfigError(f"feature map must be [H, W, {cfg.dim}], got {feature_map.shape}")
    if queries.ndim != 2 or queries.shape[-1] != cfg.dim:
        raise AttentionConfigError(f"queries must be [Q, {cfg.dim}], got {queries.shape}")


def box_attention(feature_map, queries, windows, cfg: AttentionConfig, params, trace=None) -> Tensor:
    """Multi-head box-attention with one reference window per query."""
    feature_map, queries = Tensor(feature_map) if not isinstance(feature_map, Tensor) else feature_map, \
        Tensor(queries) if not isinstance(queries, Tensor) else queries
    _check_inputs(feature_map, queries, cfg)
    q_count, n = queries.shape[0], cfg.heads
    base = _as_windows(windows, q_count)
    anchors = np.broadcast_to(base[:, None, None, :], (q_count, n, 1, 4))
    raw = ops.linear(queries, params["offset.w"], params["offset.b"]).reshape(q_count, n, 1, 4)
    feats = _grid_attend(feature_map, queries, anchors, raw, [1.0], cfg, params, trace)
    return _project_out(feats.reshape(q_count, n, cfg.head_dim), params)


def _centered_anchors(positions, sizes: np.ndarray) -> np.ndarray:
    """[Q, 2] positions x [S] sizes -> [Q, S, 4] square windows."""
    positions = np.asarray(positions.data if isinstance(positions, Tensor) else positions, dtype=float)
    q_count = positions.shape[0]
    out = np.empty((q_count, len(sizes), 4))
    out[..., :2] = positions[:, None, :]
    out[..., 2] = sizes
    out[..., 3] = sizes
    return out


def fixed_scale_attention(feature_map, queries, query_positions, anchors: AnchorSet, cfg: AttentionConfig,
                          params, trace=None) -> Tensor:
    """Box-attention whose head i starts from anchor scale i mod m."""
    feature_map = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    _check_inputs(feature_map, queries, cfg)
    if anchors.scales != cfg.scales:
        raise AttentionConfigError(f"anchor set has {anchors.scales} scales, config {cfg.scales}")
    assign = head_scale_assignment(cfg.heads, cfg.scales)
    q_count, n = queries.shape[0], cfg.heads
    per_scale = _centered_anchors(query_positions, anchors.sizes)  # [Q, m, 4]
    base = per_scale[:, assign][:, :, None, :]  # [Q, n, 1, 4]
    raw = ops.linear(queries, params["offset.w"], params["offset.b"]).reshape(q_count, n, 1, 4)
    feats = _grid_attend(feature_map, queries, base, raw, [1.0], cfg, params, trace)
    if trace is not None:
        trace["head_scales"] = assign
    return _project_out(feats.reshape(q_count, n, cfg.head_dim), params)


def adaptive_scale_attention(feature_map, queries, query_positions, anchors: AnchorSet, cfg: AttentionConfig,
                             params, trace=None) -> tuple[Tensor, Tensor]:
    """Every head attends at all m anchor scales and mixes them by softmax.

    Returns (output [Q, d], scale_weights [Q, n, m]).
    """
    feature_map = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    _check_inputs(feature_map, queries, cfg)
    if anchors.scales != cfg.scales:
        raise AttentionConfigError(f"anchor set has {anchors.scales} scales, config {cfg.scales}")
    q_count, n, m = queries.shape[0], cfg.heads, cfg.scales
    per_scale = _centered_anchors(query_positions, anchors.sizes)  # [Q, m, 4]
    base = np.broadcast_to(per_scale[:, None], (q_count, n, m, 4))
    raw = ops.linear(queries, params["offset.w"], params["offset.b"])
    if cfg.share_scale_offsets:
        raw = ops.mul(raw.reshape(q_count, n, 1, 4), np.ones((1, 1, m, 1)))
    else:
        raw = raw.reshape(q_count, n, m, 4)
    feats = _grid_attend(feature_map, queries, base, raw, cfg.temperatures(), cfg, params, trace)
    logits = ops.linear(queries, params["scale.w"], params["scale.b"]).reshape(q_count, n, m)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite scale logits")
    weights = ops.softmax(logits, axis=-1)
    heads = ops.sum(ops.mul(weights.reshape(q_count, n, m, 1), feats), axis=2)
    if trace is not None:
        trace["scale_weights"] = weights.data
    return _project_out(heads, params), weights


# ---------------------------------------------------------------------------
# masked instance-attention
# ---------------------------------------------------------------------------

def bin_index(grid: int) -> np.ndarray:
    """Quadrant bin (0..3, row-major over the 2x2 bins) of each grid cell."""
    if grid % 2:
        raise AttentionConfigError(f"masked instance-attention needs an even grid, got {grid}")
    half = grid // 2
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return ((rows >= half) * 2 + (cols >= half)).reshape(-1)


def mask_from_logits(prev_mask_logits, points: np.ndarray) -> np.ndarray:
    """0 where the previous mask logit at a grid point is > 0, MASK_NEG elsewhere.

    prev_mask_logits: [Q, Hm, Wm]; points: [Q, P, 2].  Queries whose every
    cell would be masked fall back to an all-zero mask.
    """
    logits = np.asarray(prev_mask_logits.data if isinstance(prev_mask_logits, Tensor) else prev_mask_logits)
    q_count = logits.shape[0]
    grouped = logits.transpose(1, 2, 0)[..., None]  # [Hm, Wm, Q, 1]
    pts = np.asarray(points).transpose(1, 0, 2)  # [P, Q, 2]
    sampled = ops.bilinear_sample(Tensor(grouped), Tensor(pts)).data[..., 0].T  # [Q, P]
    mask = np.where(sampled > 0, 0.0, MASK_NEG)
    all_masked = np.all(mask < 0, axis=1)
    mask[all_masked] = 0.0
    assert mask.shape[0] == q_count
    return mask


def masked_instance_attention(feature_map, queries, windows, prev_mask_logits, cfg: AttentionConfig,
                              params, trace=None) -> Tensor:
    """Dense-grid attention with one score per quadrant bin and a background mask.

    ``prev_mask_logits`` is [Q, Hm, Wm] or None (no masking, first layer).
    """
    feature_map = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    _check_inputs(feature_map, queries, cfg)
    q_count, n, dh, g = queries.shape[0], cfg.heads, cfg.head_dim, cfg.grid
    g2 = g * g
    bins = bin_index(g)
    h, w = feature_map.shape[:2]
    base = _as_windows(windows, q_count)
    raw = ops.linear(queries, params["offset.w"], params["offset.b"])
    size_scale = np.concatenate([base[:, 2:], base[:, 2:]], axis=-1)
    refined = refine_window(base, ops.mul(raw, size_scale), 1.0,
                            min_size=cfg.min_size_texels * texel_size(feature_map))
    points = grid_points(refined, g)  # [Q, g2, 2]

    value = ops.linear(feature_map, params["value.w"], params["value.b"])
    sampled = ops.bilinear_sample(value, points).reshape(q_count, g2, n, dh).transpose(0, 2, 1, 3)

    alpha = ops.linear(queries, params["bins.w"], params["bins.b"]).reshape(q_count, n, 4)
    scores = ops.index(alpha, (slice(None), slice(None), bins))  # [Q, n, g2]
    if prev_mask_logits is None:
        mask = np.zeros((q_count, g2))
    else:
        mask = mask_from_logits(prev_mask_logits, points.data)
    weights = ops.softmax(ops.add(scores, mask[:, None, :]), axis=-1)
    heads = ops.matmul(weights.reshape(q_count, n, 1, g2), sampled).reshape(q_count, n, dh)
    if trace is not None:
        trace["windows"] = refined.data
        trace["points"] = points.data
        trace["mask"] = mask
        trace["grid_weights"] = weights.data
    return _project_out(heads, params)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

def self_attention(x, cfg: AttentionConfig, params, trace=None) -> Tensor:
    """Scaled dot-product multi-head self-attention over x[..., k, d]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim < 2 or x.shape[-1] != cfg.dim:
        raise AttentionConfigError(f"self_attention expects [..., k, {cfg.dim}], got {x.shape}")
    lead, k = x.shape[:-2], x.shape[-2]
    if k < 1:
        raise AttentionConfigError("self_attention needs at least one token")
    n, dh = cfg.heads, cfg.head_dim
    nb = len(lead)
    qkv = ops.linear(x, params["qkv.w"], params["qkv.b"]).reshape(*lead, k, 3, n, dh)
    perm = tuple(range(nb)) + (nb + 1, nb + 2, nb, nb + 3)  # [..., 3, n, k, dh]
    qkv = qkv.transpose(perm)
    q = ops.index(qkv, (Ellipsis, 0, slice(None), slice(None), slice(None)))
    kk = ops.index(qkv, (Ellipsis, 1, slice(None), slice(None), slice(None)))
    v = ops.index(qkv, (Ellipsis, 2, slice(None), slice(None), slice(None)))
    scores = ops.mul(ops.matmul(q, kk.transpose(tuple(range(nb + 1)) + (nb + 2, nb + 1))), 1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)
    heads = ops.matmul(weights, v)  # [..., n, k, dh]
    perm_back = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    merged = heads.transpose(perm_back).reshape(*lead, k, n * dh)
    if trace is not None:
        trace["weights"] = weights.data
    return ops.linear(merged, params["out.w"], params["out.b"])
