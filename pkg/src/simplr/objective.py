"""Set-prediction training objective: focal, dice and GIoU losses, bipartite
matching between queries and targets, and the weighted multi-layer sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model.outputs import DetectionOutput, LayerPrediction
from .numerics import Tensor, no_grad, ops
from .numerics.tensor import as_tensor

TASKS = ("detect", "instance", "panoptic")


class MatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# weights and targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    focal: float = 5.0
    dice: float = 5.0
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 2.0

    def __post_init__(self):
        for name in ("focal", "dice", "l1", "giou", "cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def for_task(cls, task: str) -> "LossWeights":
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        return cls(cls=4.0 if task == "panoptic" else 2.0)

    def as_dict(self) -> dict[str, float]:
        return {"cls": self.cls, "l1": self.l1, "giou": self.giou, "focal": self.focal, "dice": self.dice}


@dataclass
class Targets:
    """Ground truth for one image: class ids [t], boxes [t,4] normalized (cx,cy,w,h)
    and optional binary masks [t,Hm,Wm] at the prediction resolution."""

    labels: np.ndarray
    boxes: np.ndarray
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.labels.shape[0] != self.boxes.shape[0]:
            raise ValueError(f"{self.labels.shape[0]} labels but {self.boxes.shape[0]} boxes")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float64)
            if self.masks.shape[0] != self.labels.shape[0]:
                raise ValueError(f"{self.labels.shape[0]} labels but {self.masks.shape[0]} masks")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


# ---------------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------------

def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ops.mean(x)
    if reduction == "sum":
        return ops.sum(x)
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_binary(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all((targets == 0.0) | (targets == 1.0)):
        bad = targets[(targets != 0.0) & (targets != 1.0)].ravel()[0]
        raise ValueError(f"focal loss targets must be 0 or 1, found {bad}")
    return targets


def _power(x: Tensor, gamma: float) -> Tensor:
    if gamma == 0:
        return Tensor(np.ones(x.shape))
    if float(gamma).is_integer() and gamma > 0:
        out = x
        for _ in range(int(gamma) - 1):
            out = out * x
        return out
    return ops.exp(gamma * ops.log(ops.clamp_min(x, 1e-300)))


def focal_loss(logits, targets, alpha: float | None = 0.25, gamma: float = 2.0,
               reduction: str = "mean") -> Tensor:
    """-alpha_t (1 - p_t)^gamma log(p_t) with p = sigmoid(logits).

    ``alpha=None`` weights both classes by 1, so ``gamma=0`` gives plain
    binary cross-entropy.
    """
    logits = as_tensor(logits)
    y = _check_binary(targets)
    if y.shape != logits.shape:
        raise ValueError(f"focal loss shape mismatch: logits {logits.shape} vs targets {y.shape}")
    # log(1 + e^x) - x y is the cross-entropy; 1 - p_t = sigmoid(x (1 - 2y)).
    ce = ops.softplus(logits) - logits * y
    loss = ce if gamma == 0 else _power(ops.sigmoid(logits * (1.0 - 2.0 * y)), gamma) * ce
    if alpha is not None:
        loss = loss * (alpha * y + (1.0 - alpha) * (1.0 - y))
    return _reduce(loss, reduction)


def dice_loss(mask_logits, target_mask, reduction: str = "mean") -> Tensor:
    """1 - (2|P.T| + 1) / (|P| + |T| + 1) on sigmoid probabilities.

    A 2-D input is one mask; a 3-D input [n,H,W] is n masks reduced per ``reduction``.
    """
    mask_logits = as_tensor(mask_logits)
    target = np.asarray(target_mask, dtype=np.float64)
    if target.shape != mask_logits.shape:
        raise ValueError(f"dice loss shape mismatch: {mask_logits.shape} vs {target.shape}")
    single = mask_logits.ndim < 3
    n = 1 if single else mask_logits.shape[0]
    probs = ops.reshape(ops.sigmoid(mask_logits), (n, -1))
    flat = target.reshape(n, -1)
    inter = ops.sum(probs * flat, axis=1)
    denom = ops.sum(probs, axis=1) + flat.sum(axis=1) + 1.0
    loss = 1.0 - (2.0 * inter + 1.0) / denom
    if single:
        return ops.reshape(loss, ())
    return _reduce(loss, reduction)


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(boxes):
    boxes = as_tensor(boxes)
    c, s = boxes[..., 0:2], boxes[..., 2:4]
    return ops.concat([c - 0.5 * s, c + 0.5 * s], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1)


def giou(box_a, box_b, fmt: str = "xyxy", return_iou: bool = False):
    """Generalized IoU of broadcastable box arrays [...,4]."""
    if fmt == "cxcywh":
        box_a, box_b = cxcywh_to_xyxy(box_a), cxcywh_to_xyxy(box_b)
    elif fmt != "xyxy":
        raise ValueError(f"unknown box format {fmt!r}")
    a, b = as_tensor(box_a), as_tensor(box_b)
    for name, box in (("first", a), ("second", b)):
        ext = box.data[..., 2:] - box.data[..., :2]
        if np.any(ext < 0):
            raise ValueError(f"{name} box has negative extent {ext[ext < 0].ravel()[0]:.6g}")

    def area(box):
        return (box[..., 2] - box[..., 0]) * (box[..., 3] - box[..., 1])

    lo = ops.maximum(a[..., 0:2], b[..., 0:2])
    hi = ops.minimum(a[..., 2:4], b[..., 2:4])
    wh = ops.clamp_min(hi - lo, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a) + area(b) - inter
    enc_wh = ops.maximum(a[..., 2:4], b[..., 2:4]) - ops.minimum(a[..., 0:2], b[..., 0:2])
    enclosure = enc_wh[..., 0] * enc_wh[..., 1]
    if np.any(union.data <= 0) or np.any(enclosure.data <= 0):
        raise ValueError("giou undefined for boxes whose union has zero area")
    iou = inter / union
    g = iou - (enclosure - union) / enclosure
    return (g, iou) if return_iou else g


def giou_loss(box_a, box_b, fmt: str = "xyxy") -> Tensor:
    return 1.0 - giou(box_a, box_b, fmt)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    queries: np.ndarray
    targets: np.ndarray
    num_queries: int
    total: float = 0.0

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(q), int(t)) for q, t in zip(self.queries, self.targets)]

    @property
    def unmatched(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_queries), self.queries)


def _assign(cost: np.ndarray):
    """Shortest augmenting path assignment of every row of an n x m matrix (n <= m).

    Returns (row -> column, row potentials, column potentials) with
    cost[i, j] - u[i] - v[j] >= 0 everywhere and = 0 on the assignment.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            cols = np.nonzero(used)[0]
            u[owner[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def hungarian_match(cost, tol: float = 1e-9) -> MatchResult:
    """Minimum-cost assignment of every target (column) to a distinct query (row).

    Among optimal assignments, returns the one whose sequence of query indices,
    read in target order, is lexicographically smallest.
    """
    cost = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError(f"cost matrix must be 2-D, got shape {cost.shape}")
    k, t = cost.shape
    if t > k:
        raise MatchError(f"{t} targets cannot be matched to {k} queries")
    if not np.all(np.isfinite(cost)):
        raise MatchError("cost matrix contains non-finite entries")
    if t == 0:
        return MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), k, 0.0)

    a = cost.T  # rows = targets
    current, u, v = _assign(a)
    best = float(a[np.arange(t), current].sum())
    slack = tol * max(1.0, float(np.abs(a).max()))

    # Walk targets in order, fixing each to the smallest query that still admits
    # an optimal completion.  Every optimal assignment uses only edges with zero
    # reduced cost under the optimal potentials, so only those are tried.
    fixed_cost = 0.0
    taken = np.zeros(k, dtype=bool)
    for row in range(t):
        reduced = a[row] - u[row] - v
        candidates = [c for c in np.nonzero(reduced <= slack)[0] if not taken[c]]
        if int(current[row]) not in candidates:
            candidates.append(int(current[row]))
        for col in sorted(candidates):
            if col == current[row]:
                break
            rest_rows = np.arange(row + 1, t)
            open_cols = np.nonzero(~taken)[0]
            open_cols = open_cols[open_cols != col]
            if rest_rows.size:
                sub_assign, _, _ = _assign(a[np.ix_(rest_rows, open_cols)])
                completion = open_cols[sub_assign]
                rest = float(a[rest_rows, completion].sum())
            else:
                completion, rest = np.zeros(0, np.int64), 0.0
            if fixed_cost + a[row, col] + rest <= best + slack:
                current = current.copy()
                current[row] = col
                current[row + 1:] = completion
                break
        taken[current[row]] = True
        fixed_cost += a[row, current[row]]

    total = float(a[np.arange(t), current].sum())
    return MatchResult(current.copy(), np.arange(t), k, total)


# ---------------------------------------------------------------------------
# cost matrix
# ---------------------------------------------------------------------------

def _mask_pair_costs(mask_logits: np.ndarray, target_masks: np.ndarray):
    """Pairwise (focal, dice) costs [k,t], normalized as in the loss."""
    k, t = mask_logits.shape[0], target_masks.shape[0]
    x = mask_logits.reshape(k, -1)
    y = target_masks.reshape(t, -1)
    p = 1.0 / (1.0 + np.exp(-x))
    ce_pos = np.logaddexp(0.0, -x)
    ce_neg = np.logaddexp(0.0, x)
    pos = 0.25 * (1.0 - p) ** 2 * ce_pos
    neg = 0.75 * p ** 2 * ce_neg
    fg = np.maximum(y.sum(axis=1), 1.0)
    focal = (pos @ y.T + neg @ (1.0 - y).T) / fg[None, :]
    dice = 1.0 - (2.0 * (p @ y.T) + 1.0) / (p.sum(axis=1)[:, None] + y.sum(axis=1)[None, :] + 1.0)
    return focal, dice


def build_cost_matrix(prediction: LayerPrediction, targets: Targets, weights: LossWeights,
                      use_masks: bool = False) -> np.ndarray:
    """cost[q, t] = -lambda_cls p(label_t) + lambda_l1 |b_q - b_t|_1 + lambda_giou (1 - giou) [+ mask terms]."""
    k, t = prediction.num_queries, len(targets)
    if t > k:
        raise MatchError(f"{t} targets exceed {k} queries")
    if t == 0:
        return np.zeros((k, 0))
    logits = prediction.logits.data
    boxes = prediction.boxes.data
    if targets.labels.max() >= logits.shape[1] or targets.labels.min() < 0:
        raise ValueError(f"target label outside [0, {logits.shape[1]})")
    prob = 1.0 / (1.0 + np.exp(-logits[:, targets.labels]))
    l1 = np.abs(boxes[:, None, :] - targets.boxes[None, :, :]).sum(axis=-1)
    with no_grad():
        g = giou(boxes[:, None, :], targets.boxes[None, :, :], fmt="cxcywh").data
    cost = -weights.cls * prob + weights.l1 * l1 + weights.giou * (1.0 - g)
    if use_masks:
        if prediction.masks is None or targets.masks is None:
            raise ValueError("mask costs requested but masks are missing")
        focal, dice = _mask_pair_costs(prediction.masks.data, targets.masks)
        cost = cost + weights.focal * focal + weights.dice * dice
    return cost


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Unweighted terms summed over prediction sets, and the weighted total."""

    terms: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    matches: list[MatchResult] = field(default_factory=list)


def _set_loss(pred: LayerPrediction, targets: Targets, weights: LossWeights, use_masks: bool,
              match: MatchResult, labels: np.ndarray) -> dict[str, Tensor]:
    k, num_classes = pred.logits.shape
    onehot = np.zeros((k, num_classes))
    onehot[match.queries, labels[match.targets]] = 1.0
    cls = ops.sum(focal_loss(pred.logits, onehot, reduction="none")) / float(k)
    terms = {"cls": cls}
    n = len(match.queries)
    if n == 0:
        zero = Tensor(0.0)
        terms.update(l1=zero, giou=zero)
        if use_masks:
            terms.update(focal=zero, dice=zero)
        return terms
    q, t = match.queries, match.targets
    pb = ops.index(pred.boxes, q)
    tb = targets.boxes[t]
    terms["l1"] = ops.sum(ops.abs(pb - tb)) / float(n)
    terms["giou"] = ops.sum(giou_loss(pb, tb, fmt="cxcywh")) / float(n)
    if use_masks:
        pm = ops.index(pred.masks, q)
        tm = targets.masks[t]
        per_texel = focal_loss(pm, tm, reduction="none")
        fg = np.maximum(tm.reshape(n, -1).sum(axis=1), 1.0)
        per_mask = ops.sum(ops.reshape(per_texel, (n, -1)), axis=1) / fg
        terms["focal"] = ops.sum(per_mask) / float(n)
        terms["dice"] = dice_loss(pm, tm, reduction="sum") / float(n)
    return terms


def composite_loss(outputs: DetectionOutput, targets: Targets, weights: LossWeights | None = None,
                   task: str = "detect", matcher_weights: LossWeights | None = None,
                   mask_matching: bool | None = None):
    """Sum over every decoder layer (and the proposal set, if present) of
    lambda_cls L_cls + lambda_l1 L_l1 + lambda_giou L_giou [+ lambda_focal L_focal + lambda_dice L_dice].

    Returns (loss, LossReport).  The matcher uses ``matcher_weights`` (default:
    the loss weights); mask terms enter the matcher only when ``mask_matching``
    is set, which defaults to on for mask tasks and off for detection.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    weights = weights or LossWeights.for_task(task)
    matcher_weights = matcher_weights or weights
    use_masks = task != "detect"
    if mask_matching is None:
        mask_matching = use_masks
    if use_masks and targets.masks is None:
        raise ValueError(f"task {task!r} needs target masks")

    sets: list[tuple[LayerPrediction, bool, np.ndarray]] = [
        (layer, use_masks, targets.labels) for layer in outputs.layers
    ]
    if outputs.proposals is not None:
        # Proposals carry a single objectness class and no masks.
        sets.append((outputs.proposals, False, np.zeros(len(targets), dtype=np.int64)))

    report = LossReport()
    total: Tensor | None = None
    lam = weights.as_dict()
    for pred, with_masks, labels in sets:
        tgt = Targets(labels, targets.boxes, targets.masks if with_masks else None)
        cost = build_cost_matrix(pred, tgt, matcher_weights, use_masks=with_masks and mask_matching)
        match = hungarian_match(cost)
        report.matches.append(match)
        for name, value in _set_loss(pred, tgt, weights, with_masks, match, labels).items():
            report.terms[name] = report.terms.get(name, 0.0) + value.item()
            contribution = lam[name] * value
            report.weighted[name] = report.weighted.get(name, 0.0) + contribution.item()
            total = contribution if total is None else total + contribution
    assert total is not None, "no prediction sets"
    report.total = total.item()
    return total, report
