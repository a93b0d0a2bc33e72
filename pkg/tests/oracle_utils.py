"""Independent scalar-by-scalar reference implementations used as oracles.

Everything here is written with explicit Python loops and math-module
scalars, deliberately avoiding the vectorized code paths under test.
"""

import math

import numpy as np


def cos(a, b):
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return num / (na * nb)


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def oracle_ckd_instance(queries, regions, extras, tau):
    n = len(queries)
    if n == 0:
        return 0.0
    columns = list(regions) + list(extras)
    total = 0.0
    for i in range(n):
        for j in range(len(columns)):
            u = tau * cos(queries[i], columns[j])
            if j == i:
                total -= math.log(sigmoid(u))
            else:
                total -= math.log1p(-sigmoid(u))
    return total / n


def oracle_rkd_instance(queries, regions, tau):
    n = len(queries)
    if n < 2:
        return 0.0

    def softmax_row(row):
        mx = max(row)
        exps = [math.exp(v - mx) for v in row]
        s = sum(exps)
        return [e / s for e in exps]

    total = 0.0
    for i in range(n):
        row_q = [tau * cos(queries[i], queries[j]) for j in range(n)]
        row_e = [tau * cos(regions[i], regions[j]) for j in range(n)]
        p = softmax_row(row_q)
        t = softmax_row(row_e)
        total += sum(p[k] * (math.log(p[k]) - math.log(t[k])) for k in range(n))
    return total / n


def softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def oracle_focal(q_hat, class_embs, y, colw, tau, gamma, balance):
    n = len(q_hat)
    c = len(class_embs)
    total = 0.0
    for i in range(n):
        for j in range(c):
            u = tau * cos(q_hat[i], class_embs[j])
            log_p = -softplus(-u)
            log_1p = -softplus(u)
            if y[i][j] > 0.5:
                total += colw[j] * (-balance) * math.exp(gamma * log_1p) * log_p
            else:
                total += -(1.0 - balance) * math.exp(gamma * log_p) * log_1p
    return total / n


def oracle_ckd_image(x, e, extras, tau):
    m = len(x)
    if m == 0:
        return 0.0
    columns = list(e) + list(extras)
    total = 0.0
    for i in range(m):
        # image-to-teacher over all columns
        logits = [tau * cos(x[i], col) for col in columns]
        mx = max(logits)
        denom = sum(math.exp(v - mx) for v in logits)
        total -= logits[i] - mx - math.log(denom)
        # teacher-to-image over the m student rows
        logits2 = [tau * cos(x[j], e[i]) for j in range(m)]
        mx2 = max(logits2)
        denom2 = sum(math.exp(v - mx2) for v in logits2)
        total -= logits2[i] - mx2 - math.log(denom2)
    return total / (2 * m)


def oracle_bilinear_resize(x, out_h, out_w):
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))

    def pos(i, n_out, n_in):
        if n_out == 1:
            return (n_in - 1) / 2.0
        return i * (n_in - 1) / (n_out - 1)

    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                y = pos(i, out_h, h)
                xx = pos(j, out_w, w)
                y0, x0 = int(math.floor(y)), int(math.floor(xx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                dy, dx = y - y0, xx - x0
                out[ch, i, j] = (
                    x[ch, y0, x0] * (1 - dy) * (1 - dx)
                    + x[ch, y0, x1] * (1 - dy) * dx
                    + x[ch, y1, x0] * dy * (1 - dx)
                    + x[ch, y1, x1] * dy * dx
                )
    return out


def finite_difference_grad(fn, x, step=1e-5):
    """Central finite differences of a scalar function over an array input."""
    x = np.array(x, dtype=np.float64, order="C")  # owned C-order copy; reshape(-1) must view
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fn(x)
        flat[k] = orig - step
        down = fn(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def oracle_average_precision(detections, gt_by_image, iou_fn, iou_thresh):
    """O(n^2) all-point interpolated AP with explicit matching and max scans.

    ``detections`` are (score, image_id, box) tuples, any order.
    """
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return 0.0
    ordered = sorted(detections, key=lambda d: -d[0])
    matched = {}
    flags = []
    for _score, image_id, box in ordered:
        gts = gt_by_image.get(image_id, [])
        best_iou, best_idx = 0.0, -1
        for idx, gt in enumerate(gts):
            v = iou_fn(box, gt)
            if v > best_iou:
                best_iou, best_idx = v, idx
        taken = matched.setdefault(image_id, set())
        if best_iou >= iou_thresh and best_idx not in taken:
            taken.add(best_idx)
            flags.append(True)
        else:
            flags.append(False)

    def precision_at(k):
        tp = sum(1 for f in flags[: k + 1] if f)
        return tp / (k + 1)

    def recall_at(k):
        tp = sum(1 for f in flags[: k + 1] if f)
        return tp / n_gt

    ap = 0.0
    prev_recall = 0.0
    for k in range(len(flags)):
        if not flags[k]:
            continue
        r = recall_at(k)
        best_p = max(precision_at(j) for j in range(k, len(flags)))
        ap += (r - prev_recall) * best_p
        prev_recall = r
    return ap
