"""Independent brute-force implementations used to cross-check the package.

Everything here is written as plain loops over scalars, deliberately ignoring
the vectorized code paths it verifies.
"""

import math

import numpy as np


def dice_by_counting(pred, gt, class_id, mask=None):
    """Pixel-by-pixel set counting."""
    n_a = n_b = n_both = 0
    h, w = np.asarray(pred).shape
    for r in range(h):
        for c in range(w):
            if mask is not None and not mask[r][c]:
                continue
            in_a = pred[r][c] == class_id
            in_b = gt[r][c] == class_id
            n_a += in_a
            n_b += in_b
            n_both += in_a and in_b
    if n_a + n_b == 0:
        return 1.0
    return 2.0 * n_both / (n_a + n_b)


def unlabeled_loss_by_loops(student_probs, soft_label, confidence, min_class_mass, eps=1e-7):
    """Scalar triple-loop evaluation of the confidence-weighted loss."""
    h, w, num_classes = soft_label.shape
    total = 0.0
    for cls in range(num_classes):
        mass = 0.0
        for r in range(h):
            for c in range(w):
                if int(np.argmax(soft_label[r, c])) == cls:
                    mass += confidence[r, c]
        if mass <= min_class_mass:
            continue
        class_sum = 0.0
        for r in range(h):
            for c in range(w):
                if int(np.argmax(soft_label[r, c])) == cls:
                    p = min(max(student_probs[r, c, cls], eps), 1.0)
                    class_sum += confidence[r, c] * (-math.log(p))
        total += class_sum / mass
    return total


def labeled_loss_by_loops(probs, onehot, weights, eps=1e-7):
    h, w, num_classes = probs.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            for cls in range(num_classes):
                p = min(max(probs[r, c, cls], eps), 1.0)
                total += -weights[cls] * onehot[r, c, cls] * math.log(p)
    return total / (h * w)


def entropy_by_loops(scores):
    h, w, num_classes = scores.shape
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            s = 0.0
            for cls in range(num_classes):
                p = scores[r, c, cls]
                if p > 0:
                    s -= p * math.log(p)
            out[r, c] = s
    return out


def pr_curve_by_loops(scores, gt, thresholds):
    """Threshold loop with the >=-threshold positive convention."""
    scores = np.asarray(scores).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    precision, recall = [], []
    n_pos = int(gt.sum())
    for t in thresholds:
        tp = fp = 0
        for s, g in zip(scores, gt):
            if s >= t:
                if g:
                    tp += 1
                else:
                    fp += 1
        precision.append(tp / (tp + fp) if tp + fp else 1.0)
        recall.append(tp / n_pos)
    return np.array(precision), np.array(recall)


def labels_to_boundaries(label_map, num_boundaries):
    """Inverse extraction: first row of each layer class, then the background resume row.

    Valid for strictly monotone boundary stacks where every layer is at least
    one row thick in every column after rounding.
    """
    h, w = label_map.shape
    out = np.zeros((num_boundaries, w))
    for col in range(w):
        column = label_map[:, col]
        for k in range(1, num_boundaries):
            rows = np.nonzero(column == k)[0]
            assert rows.size, f"layer {k} empty in column {col}"
            out[k - 1, col] = rows[0]
        last_rows = np.nonzero(column == num_boundaries - 1)[0]
        out[num_boundaries - 1, col] = last_rows[-1] + 1
    return out
