"""Independent reference implementations the test suite checks against.

Everything here is deliberately written as plain step-by-step Python
(list surgery, explicit loops) so it shares no code with the package.
"""

import math

import numpy as np


def greedy_size_padding(x, a, total, per_packet, cell):
    """Replay the greedy quantized padding procedure step by step."""
    out = [int(v) for v in x]
    remaining = total
    order = sorted(range(len(a)), key=lambda i: (-a[i], i))
    for i in order:
        if remaining <= 0:
            break
        d = cell * math.floor(min(a[i], per_packet, remaining) / cell)
        if d <= 0:
            continue
        out[i] += d
        remaining -= d
    return np.asarray(out, dtype=np.int64)


def top_abs_positions(scores, count):
    order = sorted(range(len(scores)), key=lambda i: (-abs(scores[i]), i))
    return sorted(order[:count])


def shifted_list_insert(channel, scores, count, kind="direction", value_vec=None):
    """Materialize the insertion explicitly: insert into a list, trim."""
    length = len(scores)
    out = list(channel)
    shift = 0
    for i in top_abs_positions(scores, count):
        if kind == "direction":
            v = 1 if scores[i] > 0 else -1
        else:
            v = value_vec[i]
        out.insert(i + shift, v)
        shift += 1
    return np.asarray(out[:length])


def batch_sum(grads):
    total = np.zeros_like(np.asarray(grads[0], dtype=np.float64))
    for g in grads:
        total = total + np.asarray(g, dtype=np.float64)
    return total


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y, class_count):
    """Direction-only nearest-centroid baseline."""
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in range(class_count)])
    d2 = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d2.argmin(axis=1) == test_y).mean())


def finite_difference_gradient(fn, x, coords, h=1e-4):
    """Central finite differences of a scalar fn at selected coordinates."""
    grads = {}
    for idx in coords:
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grads[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return grads
