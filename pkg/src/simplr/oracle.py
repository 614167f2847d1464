"""Brute-force references for tests and acceptance runs.

Nothing here imports the production kernels: every routine is an explicit
loop transcription so that agreement with the vectorized code is evidence,
not tautology.  Runtimes are cubic or factorial; never call these from
training or evaluation paths.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def oracle_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for k in range(q):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def oracle_softmax(values) -> list[float]:
    values = [float(v) for v in values]
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def oracle_normalize(x, groups_of, eps=1e-6) -> np.ndarray:
    """Two-pass mean/variance standardization over each listed index group."""
    x = np.asarray(x, float)
    out = np.empty_like(x)
    flat_in, flat_out = x.reshape(-1), out.reshape(-1)
    for members in groups_of:
        vals = [flat_in[i] for i in members]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for i in members:
            flat_out[i] = (flat_in[i] - mu) / math.sqrt(var + eps)
    return out


def oracle_deconv(x, kernel) -> np.ndarray:
    """Scatter-accumulate transposed convolution (stride 2, symmetric crop)."""
    x, kernel = np.asarray(x, float), np.asarray(kernel, float)
    h, w, cin = x.shape
    kk, _, _, cout = kernel.shape
    pad = (kk - 2) // 2
    full = np.zeros((2 * (h - 1) + kk, 2 * (w - 1) + kk, cout))
    for i in range(h):
        for j in range(w):
            for a in range(kk):
                for b in range(kk):
                    for ci in range(cin):
                        for co in range(cout):
                            full[2 * i + a, 2 * j + b, co] += x[i, j, ci] * kernel[a, b, ci, co]
    return full[pad : pad + 2 * h, pad : pad + 2 * w]


# ---------------------------------------------------------------------------
# sampling and attention
# ---------------------------------------------------------------------------

def oracle_bilinear(fmap, point) -> np.ndarray:
    """Explicit four-corner interpolation at a normalized (x, y) point."""
    fmap = np.asarray(fmap, float)
    h, w = fmap.shape[:2]
    px = min(max(point[0] * w - 0.5, 0.0), w - 1.0)
    py = min(max(point[1] * h - 0.5, 0.0), h - 1.0)
    left, top = int(math.floor(px)), int(math.floor(py))
    right, bottom = min(left + 1, w - 1), min(top + 1, h - 1)
    tx, ty = px - left, py - top
    return (
        fmap[top, left] * (1 - tx) * (1 - ty)
        + fmap[top, right] * tx * (1 - ty)
        + fmap[bottom, left] * (1 - tx) * ty
        + fmap[bottom, right] * tx * ty
    )


def _grid_cells(window, grid):
    cx, cy, w, h = window
    cells = []
    for row in range(grid):
        for col in range(grid):
            cells.append((cx - w / 2 + (col + 0.5) * w / grid, cy - h / 2 + (row + 0.5) * h / grid))
    return cells


def _vec_mat(v, m):
    return np.array([sum(v[i] * m[i, j] for i in range(len(v))) for j in range(m.shape[1])])


def _affine(v, params, name):
    return _vec_mat(v, params[f"{name}.w"]) + params[f"{name}.b"]


def oracle_attention(query, fmap, params, tag, *, window=None, position=None, anchor_sizes=None,
                     lam=None, heads=1, grid=2, prev_mask=None, min_size=(0.0, 0.0)) -> np.ndarray:
    """Recompute one query's output with explicit loops over heads/scales/cells.

    ``params`` maps names to numpy arrays.  Tags: "box", "fixed",
    "adaptive", "masked".
    """
    if tag not in ("box", "fixed", "adaptive", "masked"):
        raise ValueError(f"unknown mechanism tag {tag!r}")
    query = np.asarray(query, float)
    fmap = np.asarray(fmap, float)
    d = query.shape[0]
    dh = d // heads
    value_map = np.zeros(fmap.shape[:2] + (d,))
    for i in range(fmap.shape[0]):
        for j in range(fmap.shape[1]):
            value_map[i, j] = _affine(fmap[i, j], params, "value")

    def refine(base, delta, temp):
        x, y, w, h = base
        out = [x + delta[0] * w * temp, y + delta[1] * h * temp, w + delta[2] * w * temp, h + delta[3] * h * temp]
        out[2] = max(out[2], min_size[0])
        out[3] = max(out[3], min_size[1])
        return out

    head_outputs = []
    if tag == "masked":
        delta = _affine(query, params, "offset")
        roi = refine(window, delta, 1.0)
        cells = _grid_cells(roi, grid)
        half = grid // 2
        bin_scores = _affine(query, params, "bins")
        mask = [0.0] * len(cells)
        if prev_mask is not None:
            for c, pt in enumerate(cells):
                mask[c] = 0.0 if oracle_bilinear(prev_mask[..., None], pt)[0] > 0 else -1e9
            if all(v < 0 for v in mask):
                mask = [0.0] * len(cells)
        for hd in range(heads):
            logits = []
            for c in range(len(cells)):
                row, col = divmod(c, grid)
                k = (row >= half) * 2 + (col >= half)
                logits.append(bin_scores[hd * 4 + k] + mask[c])
            wts = oracle_softmax(logits)
            acc = np.zeros(dh)
            for c, pt in enumerate(cells):
                acc += wts[c] * oracle_bilinear(value_map, pt)[hd * dh : (hd + 1) * dh]
            head_outputs.append(acc)
    else:
        delta = _affine(query, params, "offset")
        relpos = params["relpos"]
        if tag == "adaptive":
            m = len(anchor_sizes)
            scale_logits = _affine(query, params, "scale")
            per_head_offsets = len(delta) // heads
        for hd in range(heads):
            scores = [sum(query[t] * relpos[hd, c, t] for t in range(d)) for c in range(grid * grid)]
            alpha = oracle_softmax(scores)
            if tag == "box":
                bases, temps = [window], [1.0]
            elif tag == "fixed":
                size = anchor_sizes[hd % len(anchor_sizes)]
                bases, temps = [[position[0], position[1], size, size]], [1.0]
            else:
                bases = [[position[0], position[1], s, s] for s in anchor_sizes]
                temps = [2.0**j / lam for j in range(m)]
            feats = []
            for j, (base, temp) in enumerate(zip(bases, temps)):
                if tag == "adaptive" and per_head_offsets == 4 * m:
                    dlt = delta[hd * 4 * m + 4 * j : hd * 4 * m + 4 * j + 4]
                elif tag == "adaptive":
                    dlt = delta[hd * 4 : hd * 4 + 4]
                else:
                    dlt = delta[hd * 4 : hd * 4 + 4]
                roi = refine(base, dlt, temp)
                acc = np.zeros(dh)
                for c, pt in enumerate(_grid_cells(roi, grid)):
                    acc += alpha[c] * oracle_bilinear(value_map, pt)[hd * dh : (hd + 1) * dh]
                feats.append(acc)
            if tag == "adaptive":
                sw = oracle_softmax(scale_logits[hd * m : (hd + 1) * m])
                head_outputs.append(sum(sw[j] * feats[j] for j in range(m)))
            else:
                head_outputs.append(feats[0])
    concat = np.concatenate(head_outputs)
    return _affine(concat, params, "out")


def oracle_self_attention(tokens, params, heads) -> np.ndarray:
    tokens = np.asarray(tokens, float)
    k, d = tokens.shape
    dh = d // heads
    qkv = np.array([_affine(t, params, "qkv") for t in tokens])
    out_rows = []
    for i in range(k):
        pieces = []
        for hd in range(heads):
            q = qkv[i, hd * dh : (hd + 1) * dh]
            scores = [sum(q * qkv[j, d + hd * dh : d + (hd + 1) * dh]) / math.sqrt(dh) for j in range(k)]
            wts = oracle_softmax(scores)
            pieces.append(sum(wts[j] * qkv[j, 2 * d + hd * dh : 2 * d + (hd + 1) * dh] for j in range(k)))
        out_rows.append(_affine(np.concatenate(pieces), params, "out"))
    return np.array(out_rows)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def oracle_assignment(cost, tol: float = 1e-9):
    """Enumerate every injective query choice; lexicographically first optimum.

    cost is [queries, targets] with targets <= 7.  Returns (pairs, total)
    where pairs lists (query, target) sorted by target.
    """
    cost = np.asarray(cost, float)
    k, t = cost.shape
    if t > 7:
        raise ValueError(f"oracle_assignment enumerates at most 7 targets, got {t}")
    if t == 0:
        return [], 0.0
    totals = []
    for perm in itertools.permutations(range(k), t):
        totals.append((perm, sum(cost[perm[j], j] for j in range(t))))
    best = min(total for _, total in totals)
    scale = max(1.0, float(np.abs(cost).max()))
    for perm, total in totals:
        if total <= best + tol * scale:
            return [(perm[j], j) for j in range(t)], total
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def oracle_ap(predictions, ground_truth, iou_threshold=0.5) -> float:
    """Mean over classes of 101-point interpolated average precision.

    predictions: list of (image_id, class_id, score, box_cxcywh);
    ground_truth: list of (image_id, class_id, box_cxcywh).  Each class's
    predictions are visited in descending score (ties: input order) and
    greedily matched to the unmatched same-image ground truth with the
    highest IoU at or above the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    classes = sorted({g[1] for g in ground_truth})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        gts = [(i, g) for i, g in enumerate(ground_truth) if g[1] == cls]
        preds = [(i, p) for i, p in enumerate(predictions) if p[1] == cls]
        preds.sort(key=lambda item: (-item[1][2], item[0]))
        used = set()
        flags = []
        for _, (img, _, _, box) in preds:
            best_iou, best_gt = -1.0, None
            for gi, (gimg, _, gbox) in gts:
                if gimg != img or gi in used:
                    continue
                iou = _box_iou(box, gbox)
                if iou >= iou_threshold and iou > best_iou:
                    best_iou, best_gt = iou, gi
            if best_gt is None:
                flags.append(False)
            else:
                used.add(best_gt)
                flags.append(True)
        precisions, recalls = [], []
        tp = 0
        for n, hit in enumerate(flags, start=1):
            tp += hit
            precisions.append(tp / n)
            recalls.append(tp / len(gts))
        total = 0.0
        for r in range(101):
            level = r / 100
            best = 0.0
            for p, rc in zip(precisions, recalls):
                if rc >= level - 1e-12 and p > best:
                    best = p
            total += best
        aps.append(total / 101)
    return sum(aps) / len(aps)


def oracle_panoptic_merge(mask_probs, class_probs, min_area=16):
    """Per-texel argmax of class score x mask probability.

    mask_probs [k, H, W], class_probs [k, C].  Each query scores with its best
    class; ties go to the lower query index.  Segments under min_area texels
    are dropped (texels set to -1).  Returns the per-texel query id map.
    """
    mask_probs = np.asarray(mask_probs, float)
    class_probs = np.asarray(class_probs, float)
    k, h, w = mask_probs.shape
    best_class_score = [max(class_probs[q]) for q in range(k)]
    owner = np.full((h, w), -1, dtype=int)
    for y in range(h):
        for x in range(w):
            best_q, best_v = 0, -1.0
            for q in range(k):
                v = best_class_score[q] * mask_probs[q, y, x]
                if v > best_v:
                    best_q, best_v = q, v
            owner[y, x] = best_q
    for q in range(k):
        area = sum(1 for y in range(h) for x in range(w) if owner[y, x] == q)
        if 0 < area < min_area:
            for y in range(h):
                for x in range(w):
                    if owner[y, x] == q:
                        owner[y, x] = -1
    return owner
