"""Independent reference computations used by the tests.

Everything here is written with plain Python loops over float64 numpy values
and shares no code with the package's implementations.
"""

import math

import numpy as np
import torch


def as_np(t):
    return t.detach().to(torch.float64).numpy() if isinstance(t, torch.Tensor) else np.asarray(t, float)


def l2(v):
    return math.sqrt(sum(float(x) * float(x) for x in v))


def patch_weights(cls, patches, mode="inverse_distance", eps=1e-8):
    cls, patches = as_np(cls), as_np(patches)
    raw = []
    for p in patches:
        d = l2([c - q for c, q in zip(cls, p)])
        if mode == "inverse_distance":
            raw.append(1.0 / (d + eps))
        elif mode == "distance":
            raw.append(d + eps)
        else:
            raw.append(1.0)
    top = max(raw)
    return [r / top for r in raw]


def pks(cur_patches, cur_cls, old_patches, old_cls, weights):
    cur_patches, old_patches = as_np(cur_patches), as_np(old_patches)
    total = 0.0
    for w, p, q in zip(weights, cur_patches, old_patches):
        total += float(w) * l2([a - b for a, b in zip(p, q)])
    return total + l2([a - b for a, b in zip(as_np(cur_cls), as_np(old_cls))])


def offset_mse(cls_cur, cls_old, centers, pairs):
    cls_cur, cls_old, centers = as_np(cls_cur), as_np(cls_old), as_np(centers)
    losses = []
    for i, j in pairs:
        o_cur = [a - m for a, m in zip(cls_cur[i], centers[i])]
        o_old = [a - m for a, m in zip(cls_old[j], centers[j])]
        losses.append(sum((a - b) ** 2 for a, b in zip(o_cur, o_old)) / len(o_cur))
    return sum(losses) / len(losses)


def softmax(logits):
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    s = sum(exps)
    return [e / s for e in exps]


def cross_entropy(embeddings, labels, weight, bias):
    embeddings, weight, bias = as_np(embeddings), as_np(weight), as_np(bias)
    total = 0.0
    for z, y in zip(embeddings, labels):
        logits = [sum(w * v for w, v in zip(row, z)) + b for row, b in zip(weight, bias)]
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[int(y)]
    return total / len(labels)


def forgetting(a, k):
    """Double loop over a list-of-lists accuracy matrix (0-based storage, 1-based k)."""
    per = []
    for i in range(k - 1):
        best = None
        for t in range(i, k - 1):
            diff = a[t][i] - a[k - 1][i]
            best = diff if best is None or diff > best else best
        per.append(best)
    total = 0.0
    for f in per:
        total += f
    return per, total / len(per)


def mean(values):
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def central_difference_grad(fn, param, h=1e-3):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat, gflat = param.data.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = float(fn())
        flat[k] = orig - h
        down = float(fn())
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-10):
    diff = float(torch.linalg.vector_norm(analytic - numeric))
    scale = max(float(torch.linalg.vector_norm(analytic)), float(torch.linalg.vector_norm(numeric)))
    if diff < floor:
        return 0.0
    return diff / scale
