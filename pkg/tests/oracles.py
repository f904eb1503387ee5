"""Brute-force metric oracles: per-pixel loops sharing only the threshold grid with the library."""

from bridgenet.metrics import THRESHOLDS


def miou_oracle(pred, gt, k, ignore=255):
    inter = [0] * k
    union = [0] * k
    present = [False] * k
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g == ignore:
            continue
        present[g] = True
        if p == g:
            inter[g] += 1
            union[g] += 1
        else:
            union[g] += 1
            if p < k:
                union[p] += 1
    vals = [inter[c] / union[c] for c in range(k) if present[c]]
    return sum(vals) / len(vals)


def f_oracle(tp_p, n_pred, tp_r, n_gt):
    if n_pred == 0 and n_gt == 0:
        return 1.0
    p = tp_p / n_pred if n_pred else 0.0
    r = tp_r / n_gt if n_gt else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def maxf_oracle(probs, gts):
    best = 0.0
    for t in THRESHOLDS:
        tp = n_pred = n_gt = 0
        for p, g in zip(probs, gts):
            for pv, gv in zip(p.ravel().tolist(), g.ravel().tolist()):
                hit = pv >= t
                n_pred += hit
                n_gt += gv
                tp += hit and gv
        best = max(best, f_oracle(tp, n_pred, tp, n_gt))
    return best


def near(mask, y, x, r):
    h, w = mask.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                return True
    return False


def odsf_oracle(probs, gts, r=1):
    best = 0.0
    for t in THRESHOLDS:
        tp_p = n_pred = tp_r = n_gt = 0
        for p, g in zip(probs, gts):
            pred = p >= t
            h, w = p.shape
            for y in range(h):
                for x in range(w):
                    if pred[y, x]:
                        n_pred += 1
                        tp_p += near(g, y, x, r)
                    if g[y, x]:
                        n_gt += 1
                        tp_r += near(pred, y, x, r)
        best = max(best, f_oracle(tp_p, n_pred, tp_r, n_gt))
    return best
