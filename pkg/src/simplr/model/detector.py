"""Plain single-scale detector: ViT-lite backbone, one projection to the head
scale, scale-aware encoder, two-stage proposals and a mask-aware decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..attention import (
    AttentionConfig,
    adaptive_scale_attention,
    box_attention,
    fixed_scale_attention,
    init_box_attention,
    init_masked_instance_attention,
    init_self_attention,
    masked_instance_attention,
    self_attention,
    texel_centers,
)
from ..numerics import Parameter, Tensor, make_rng, ops
from ..params import linear_params, merge, norm_params, scope, xavier
from .config import ConfigError, ModelConfig
from .outputs import DetectionOutput, LayerPrediction, PanopticOutput

_INV_SIGMOID_EPS = 1e-5


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def inverse_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), _INV_SIGMOID_EPS, 1 - _INV_SIGMOID_EPS)
    return np.log(x) - np.log1p(-x)


def sine_position(points: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """2-D sine/cosine encoding of normalized (x, y) points: [N, 2] -> [N, dim].

    The first half of the channels encodes y, the second half x; within each
    half, sines and cosines of geometrically spaced frequencies interleave.
    """
    if dim % 4:
        raise ConfigError(f"sine position encoding needs dim divisible by 4, got {dim}")
    points = np.asarray(points, dtype=float)
    quarter = dim // 4
    freqs = temperature ** (np.arange(quarter) / quarter)
    parts = []
    for coord in (points[:, 1], points[:, 0]):
        angle = 2 * np.pi * coord[:, None] / freqs[None, :]
        parts.append(np.stack([np.sin(angle), np.cos(angle)], axis=-1).reshape(len(points), -1))
    return np.concatenate(parts, axis=1)


def _lin(x, p, name):
    return ops.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _norm(x, p, name):
    return ops.layer_norm(x, p[f"{name}.gain"], p[f"{name}.shift"])


def _ffn(x, p):
    return _lin(ops.gelu(_lin(x, p, "ffn1")), p, "ffn2")


def _init_ffn(rng, dim, ratio) -> dict[str, Parameter]:
    out: dict[str, Parameter] = {}
    merge(out, "ffn1", linear_params(rng, dim, dim * ratio))
    merge(out, "ffn2", linear_params(rng, dim * ratio, dim))
    return out


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _init_scale_layer(rng, cfg: ModelConfig) -> dict[str, Parameter]:
    """One scale-aware attention layer plus feed-forward, both post-normalized."""
    p: dict[str, Parameter] = {}
    mech = "adaptive" if cfg.mechanism == "adaptive" else "box"
    merge(p, "attn", init_box_attention(rng, cfg.encoder_attention(), mech))
    merge(p, "norm1", norm_params(cfg.encoder_dim))
    merge(p, "", _init_ffn(rng, cfg.encoder_dim, cfg.ffn_ratio))
    merge(p, "norm2", norm_params(cfg.encoder_dim))
    return p


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    rng = make_rng(seed)
    params: dict[str, Parameter] = {}
    db, de, dd = cfg.backbone_dim, cfg.encoder_dim, cfg.decoder_dim
    g = cfg.backbone_grid

    # backbone
    p = cfg.patch_size
    params["backbone.patch.kernel"] = Parameter(xavier(rng, p * p * 3, db, shape=(p, p, 3, db)))
    params["backbone.patch.bias"] = Parameter(np.zeros(db))
    params["backbone.pos"] = Parameter(rng.normal(0.0, 0.02, size=(g, g, db)))
    for i in range(cfg.backbone_depth):
        block: dict[str, Parameter] = {}
        merge(block, "norm1", norm_params(db))
        merge(block, "attn", init_self_attention(rng, cfg.backbone_attention()))
        merge(block, "norm2", norm_params(db))
        merge(block, "", _init_ffn(rng, db, cfg.ffn_ratio))
        merge(params, f"backbone.block{i}", block)
    merge(params, "backbone.norm", norm_params(db))

    # projection to the head scale
    ratio = cfg.patch_size / cfg.feature_stride
    if ratio == 1.0:
        merge(params, "project.conv", linear_params(rng, db, de))
        merge(params, "project.norm0", norm_params(de))
    elif ratio < 1.0:
        k = int(round(1 / ratio))
        params["project.down.kernel"] = Parameter(xavier(rng, k * k * db, de, shape=(k, k, db, de)))
        params["project.down.bias"] = Parameter(np.zeros(de))
        merge(params, "project.norm0", norm_params(de))
    else:
        stages = int(round(np.log2(ratio)))
        cin = db
        for s in range(stages):
            params[f"project.up{s}.kernel"] = Parameter(xavier(rng, cin, de, shape=(2, 2, cin, de)))
            params[f"project.up{s}.bias"] = Parameter(np.zeros(de))
            merge(params, f"project.norm{s}", norm_params(de))
            cin = de

    # encoder
    for i in range(cfg.encoder_layers):
        merge(params, f"encoder.layer{i}", _init_scale_layer(rng, cfg))

    # two-stage proposals
    merge(params, "proposal.memory", linear_params(rng, de, de))
    merge(params, "proposal.memory_norm", norm_params(de))
    merge(params, "proposal.score", linear_params(rng, de, 1))
    params["proposal.score.b"].data[:] = -2.0
    merge(params, "proposal.box1", linear_params(rng, de, de))
    merge(params, "proposal.box2", linear_params(rng, de, 4, zero=True))
    merge(params, "query.proj", linear_params(rng, de, dd))
    merge(params, "query.norm", norm_params(dd))
    if de != dd:
        merge(params, "decoder.memory", linear_params(rng, de, dd))

    # decoder
    for i in range(cfg.decoder_layers):
        layer: dict[str, Parameter] = {}
        merge(layer, "self", init_self_attention(rng, AttentionConfig(dd, cfg.num_decoder_heads)))
        merge(layer, "norm1", norm_params(dd))
        merge(layer, "cross", init_masked_instance_attention(rng, cfg.decoder_attention()))
        merge(layer, "norm2", norm_params(dd))
        merge(layer, "", _init_ffn(rng, dd, cfg.ffn_ratio))
        merge(layer, "norm3", norm_params(dd))
        merge(params, f"decoder.layer{i}", layer)
    merge(params, "head.cls", linear_params(rng, dd, cfg.num_classes))
    params["head.cls.b"].data[:] = -2.0
    merge(params, "head.box1", linear_params(rng, dd, dd))
    merge(params, "head.box2", linear_params(rng, dd, 4, zero=True))

    if cfg.uses_masks:
        merge(params, "head.mask1", linear_params(rng, dd, dd))
        merge(params, "head.mask2", linear_params(rng, dd, de))
        for i in range(cfg.pixel_head_layers):
            merge(params, f"pixel.layer{i}", _init_scale_layer(rng, cfg))
    return params


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def _windowed(x: Tensor, window: int) -> Tensor:
    """[H, W, d] -> [H/w * W/w, w*w, d] non-overlapping windows, row-major."""
    h, w, d = x.shape
    return x.reshape(h // window, window, w // window, window, d).transpose(0, 2, 1, 3, 4).reshape(
        (h // window) * (w // window), window * window, d)


def _unwindowed(x: Tensor, h: int, w: int, window: int) -> Tensor:
    d = x.shape[-1]
    return x.reshape(h // window, w // window, window, window, d).transpose(0, 2, 1, 3, 4).reshape(h, w, d)


def backbone_forward(image, cfg: ModelConfig, params) -> Tensor:
    """Patchify, add absolute positions, then windowed / global self-attention blocks."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ConfigError(f"image must be [H, W, 3], got {image.shape}")
    h, w = image.shape[:2]
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"image extent {h}x{w} not divisible by patch size {cfg.patch_size}")
    x = ops.conv2d_patchify(image, params["backbone.patch.kernel"], params["backbone.patch.bias"])
    gh, gw = x.shape[:2]
    if (gh, gw) != params["backbone.pos"].shape[:2]:
        raise ConfigError(f"patch grid {gh}x{gw} does not match position table {params['backbone.pos'].shape[:2]}")
    x = x + params["backbone.pos"]
    acfg = cfg.backbone_attention()
    for i in range(cfg.backbone_depth):
        p = scope(params, f"backbone.block{i}")
        y = _norm(x, p, "norm1")
        if (i + 1) in cfg.global_blocks:
            y = self_attention(y.reshape(1, gh * gw, cfg.backbone_dim), acfg, scope(p, "attn")).reshape(gh, gw, -1)
        else:
            if gh % cfg.window or gw % cfg.window:
                raise ConfigError(f"patch grid {gh}x{gw} not divisible by window {cfg.window}")
            y = _unwindowed(self_attention(_windowed(y, cfg.window), acfg, scope(p, "attn")), gh, gw, cfg.window)
        x = x + y
        x = x + _ffn(_norm(x, p, "norm2"), p)
    return _norm(x, params, "backbone.norm")


def project_features(backbone_map, cfg: ModelConfig, params) -> Tensor:
    """Map backbone features (stride = patch size) to the head's scale and width."""
    x = backbone_map if isinstance(backbone_map, Tensor) else Tensor(backbone_map)
    ratio = cfg.patch_size / cfg.feature_stride
    groups = ops.default_groups(cfg.encoder_dim)

    def gn(t, s):
        return ops.group_norm(t, groups, params[f"project.norm{s}.gain"], params[f"project.norm{s}.shift"])

    if ratio == 1.0:
        return gn(ops.linear(x, params["project.conv.w"], params["project.conv.b"]), 0)
    if ratio < 1.0:
        return gn(ops.conv2d_patchify(x, params["project.down.kernel"], params["project.down.bias"]), 0)
    stages = int(round(np.log2(ratio)))
    for s in range(stages):
        x = gn(ops.deconv2x(x, params[f"project.up{s}.kernel"], params[f"project.up{s}.bias"]), s)
    return x


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def scale_attention(feature_map: Tensor, queries: Tensor, positions: np.ndarray, cfg: ModelConfig, params,
                    trace=None) -> Tensor:
    """The configured scale-aware attention with one query per position."""
    acfg = cfg.encoder_attention()
    anchors = cfg.anchors()
    if cfg.mechanism == "adaptive":
        return adaptive_scale_attention(feature_map, queries, positions, anchors, acfg, params, trace)[0]
    if cfg.mechanism == "fixed":
        return fixed_scale_attention(feature_map, queries, positions, anchors, acfg, params, trace)
    size = anchors.sizes[0]
    windows = np.concatenate([positions, np.full((len(positions), 2), size)], axis=1)
    return box_attention(feature_map, queries, windows, acfg, params, trace)


def _scale_layer(x: Tensor, cfg: ModelConfig, p, trace=None) -> Tensor:
    h, w, d = x.shape
    positions = texel_centers(h, w)
    flat = x.reshape(h * w, d)
    queries = flat + sine_position(positions, d)
    attended = scale_attention(x, queries, positions, cfg, scope(p, "attn"), trace)
    flat = _norm(flat + attended, p, "norm1")
    flat = _norm(flat + _ffn(flat, p), p, "norm2")
    return flat.reshape(h, w, d)


def encoder_forward(feature_map, cfg: ModelConfig, params, traces: list | None = None) -> Tensor:
    """Every texel queries the map at its own position; shape is preserved."""
    x = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    for i in range(cfg.encoder_layers):
        trace = {} if traces is not None else None
        x = _scale_layer(x, cfg, scope(params, f"encoder.layer{i}"), trace)
        if traces is not None:
            traces.append(trace)
    return x


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

@dataclass
class Proposal:
    score: float
    window: np.ndarray
    feature: np.ndarray
    index: int


@dataclass
class ProposalSet:
    """All per-texel proposals plus the top-k selection."""

    logits: Tensor  # [HW, 1]
    boxes: Tensor  # [HW, 4]
    memory: Tensor  # [HW, d]
    selected: np.ndarray  # [k] texel indices, best first

    def as_list(self) -> list[Proposal]:
        return [Proposal(float(self.logits.data[i, 0]), self.boxes.data[i].copy(), self.memory.data[i].copy(), int(i))
                for i in self.selected]


def proposal_anchor_size(cfg: ModelConfig) -> float:
    return cfg.anchor_base * 2.0 ** (cfg.scales // 2) / cfg.image_size


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; equal scores keep row-major order."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if k > scores.size:
        raise ValueError(f"cannot select {k} proposals from {scores.size} texels")
    if k < 0:
        raise ValueError(f"proposal count must be non-negative, got {k}")
    return np.argsort(-scores, kind="stable")[:k]


def propose_objects(encoder_map, k: int, cfg: ModelConfig, params) -> ProposalSet:
    x = encoder_map if isinstance(encoder_map, Tensor) else Tensor(encoder_map)
    h, w, d = x.shape
    if k > h * w:
        raise ValueError(f"cannot select {k} proposals from {h * w} texels")
    memory = _norm(_lin(x.reshape(h * w, d), params, "proposal.memory"), params, "proposal.memory_norm")
    logits = _lin(memory, params, "proposal.score")
    delta = _lin(ops.relu(_lin(memory, params, "proposal.box1")), params, "proposal.box2")
    size = proposal_anchor_size(cfg)
    anchors = np.concatenate([texel_centers(h, w), np.full((h * w, 2), size)], axis=1)
    boxes = ops.sigmoid(delta + inverse_sigmoid(anchors))
    return ProposalSet(logits, boxes, memory, top_k(logits.data[:, 0], k))


# ---------------------------------------------------------------------------
# decoder and heads
# ---------------------------------------------------------------------------

def predict_masks(queries, pixel_features) -> Tensor:
    """mask[q, y, x] = <queries[q], pixel_features[y, x]>."""
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    pixel = pixel_features if isinstance(pixel_features, Tensor) else Tensor(pixel_features)
    if queries.shape[-1] != pixel.shape[-1]:
        raise ValueError(f"query dim {queries.shape[-1]} != pixel feature dim {pixel.shape[-1]}")
    h, w, d = pixel.shape
    return ops.matmul(queries, pixel.reshape(h * w, d).transpose()).reshape(queries.shape[0], h, w)


def upsample2x(feature_map: Tensor) -> Tensor:
    h, w, d = feature_map.shape
    points = texel_centers(2 * h, 2 * w)
    return ops.bilinear_sample(feature_map, points).reshape(2 * h, 2 * w, d)


def panoptic_pixel_head(encoder_map, cfg: ModelConfig, params) -> Tensor:
    """Bilinear x2 upsample followed by ``pixel_head_layers`` scale-aware layers."""
    x = upsample2x(encoder_map if isinstance(encoder_map, Tensor) else Tensor(encoder_map))
    for i in range(cfg.pixel_head_layers):
        x = _scale_layer(x, cfg, scope(params, f"pixel.layer{i}"))
    return x


def _heads(q: Tensor, windows: np.ndarray, pixel: Tensor | None, params):
    logits = _lin(q, params, "head.cls")
    delta = _lin(ops.relu(_lin(q, params, "head.box1")), params, "head.box2")
    boxes = ops.sigmoid(delta + inverse_sigmoid(windows))
    masks = None
    if pixel is not None:
        embed = _lin(ops.relu(_lin(q, params, "head.mask1")), params, "head.mask2")
        masks = predict_masks(embed, pixel)
    return LayerPrediction(boxes, logits, masks)


def _frozen(frozen: dict | None, key: str, value):
    """Gradient-free values (windows, selections, masks) are recorded on first
    use and replayed afterwards, so finite differences see the same function
    that backward differentiates."""
    if frozen is None:
        return value
    return frozen.setdefault(key, value)


def decoder_forward(queries, encoder_map, initial_windows, cfg: ModelConfig, params,
                    pixel_features=None, traces: list | None = None, frozen: dict | None = None
                    ) -> list[LayerPrediction]:
    """Self-attention, masked instance-attention and feed-forward per layer, with
    class/box/mask predictions after every layer."""
    q = queries if isinstance(queries, Tensor) else Tensor(queries)
    memory = encoder_map if isinstance(encoder_map, Tensor) else Tensor(encoder_map)
    if "decoder.memory.w" in params:
        memory = _lin(memory, params, "decoder.memory")
    windows = np.asarray(initial_windows.data if isinstance(initial_windows, Tensor) else initial_windows, float)
    self_cfg = AttentionConfig(cfg.decoder_dim, cfg.num_decoder_heads)
    cross_cfg = cfg.decoder_attention()
    prev_masks = None
    outputs: list[LayerPrediction] = []
    for i in range(cfg.decoder_layers):
        p = scope(params, f"decoder.layer{i}")
        trace = {} if traces is not None else None
        pos = sine_position(windows[:, :2], cfg.decoder_dim)
        q = _norm(q + self_attention(q + pos, self_cfg, scope(p, "self")), p, "norm1")
        q = _norm(q + masked_instance_attention(memory, q, windows, prev_masks, cross_cfg, scope(p, "cross"), trace),
                  p, "norm2")
        q = _norm(q + _ffn(q, p), p, "norm3")
        pred = _heads(q, windows, pixel_features, params)
        outputs.append(pred)
        if traces is not None:
            traces.append(trace)
        if pred.masks is not None:
            prev_masks = _frozen(frozen, f"masks{i}", pred.masks.data.copy())
        if cfg.window_update == "iterative":
            windows = _frozen(frozen, f"windows{i}", pred.boxes.data.copy())
    return outputs


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def forward(image, cfg: ModelConfig, params, traces: dict | None = None, frozen: dict | None = None
            ) -> DetectionOutput:
    feats = backbone_forward(image, cfg, params)
    enc_in = project_features(feats, cfg, params)
    enc_traces = [] if traces is not None else None
    enc = encoder_forward(enc_in, cfg, params, enc_traces)
    props = propose_objects(enc, cfg.num_queries, cfg, params)
    sel = _frozen(frozen, "selected", props.selected)
    queries = _norm(_lin(ops.index(props.memory, sel), params, "query.proj"), params, "query.norm")
    windows = _frozen(frozen, "windows", props.boxes.data[sel].copy())
    pixel = panoptic_pixel_head(enc, cfg, params) if cfg.uses_masks else None
    dec_traces = [] if traces is not None else None
    layers = decoder_forward(queries, enc, windows, cfg, params, pixel, dec_traces, frozen)
    if traces is not None:
        traces.update(encoder=enc_traces, decoder=dec_traces, proposals=props, encoder_map=enc)
    return DetectionOutput(layers, LayerPrediction(props.boxes, props.logits), [windows])


def panoptic_merge(mask_logits, class_logits, min_area: int = 16) -> PanopticOutput:
    """Assign each texel to the query maximizing (best class prob) x (mask prob).

    Ties go to the lower query index; segments smaller than ``min_area``
    texels are dropped to void (-1).
    """
    masks = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits, float)
    logits = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits, float)
    mask_probs = 1.0 / (1.0 + np.exp(-masks))
    class_probs = 1.0 / (1.0 + np.exp(-logits))
    score = class_probs.max(axis=1)
    owner = np.argmax(score[:, None, None] * mask_probs, axis=0)  # first maximum wins
    areas = np.bincount(owner.ravel(), minlength=masks.shape[0])
    small = (areas > 0) & (areas < min_area)
    owner = np.where(small[owner], -1, owner)
    classes = {int(q): int(np.argmax(class_probs[q])) for q in np.unique(owner) if q >= 0}
    return PanopticOutput(Tensor(mask_probs), owner, classes)
