"""Independent reference implementations used to cross-check the library.

Everything here is deliberately written as plain loops (or the most naive
numpy expression available) over raw arrays, avoiding the library's own
code paths, so that a bug on either side shows up as a disagreement.
"""

import math

import numpy as np
from scipy.special import erf


# ---------------------------------------------------------------------------
# finite differences

def fd_gradients(params, loss_fn, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every parameter entry.

    loss_fn must recompute the loss from the current parameter values and
    return a python float; parameters are perturbed in place and restored.
    """
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        out[name] = g.reshape(p.data.shape)
    return out


def grad_mismatches(analytic, fd, rel_tol, abs_tol):
    """Entries violating |a - fd| <= rel_tol*max(|a|,|fd|) + abs_tol.

    The absolute floor covers near-zero gradients where the finite
    difference itself is dominated by cancellation noise.
    """
    bad = []
    for name in fd:
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        f = fd[name].reshape(-1)
        diff = np.abs(a - f)
        bound = rel_tol * np.maximum(np.abs(a), np.abs(f)) + abs_tol
        for i in np.flatnonzero(diff > bound)[:3]:
            bad.append((name, int(i), float(a[i]), float(f[i])))
    return bad


# ---------------------------------------------------------------------------
# classification metrics

def ap_naive(scores, labels):
    """All-points-interpolated average precision via explicit rank loops."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for v in labels if v)
    points = []  # (recall, precision) at each rank
    tp = 0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            tp += 1
        points.append((tp / n_pos, tp / rank))
    total = 0.0
    prev_recall = 0.0
    for k, (recall, _) in enumerate(points):
        envelope = max(p for r, p in points[k:])
        total += (recall - prev_recall) * envelope
        prev_recall = recall
    return total


def map_naive(scores, labels):
    aps = []
    for k in range(scores.shape[1]):
        if labels[:, k].sum() > 0:
            aps.append(ap_naive(list(scores[:, k]), list(labels[:, k])))
    return sum(aps) / len(aps)


def miou_naive(pred, gt, num_classes):
    ious = []
    for k in range(num_classes):
        inter = union = 0
        for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
            a, b = p == k, g == k
            inter += int(a and b)
            union += int(a or b)
        if union > 0:
            ious.append(inter / union)
    return sum(ious) / len(ious)


# ---------------------------------------------------------------------------
# image metrics

def mae_naive(a, b):
    total = 0.0
    fa, fb = a.reshape(-1), b.reshape(-1)
    for x, y in zip(fa, fb):
        total += abs(float(x) - float(y))
    return total / fa.size


def psnr_naive(a, b, max_val):
    fa, fb = a.reshape(-1), b.reshape(-1)
    mse = 0.0
    for x, y in zip(fa, fb):
        d = float(x) - float(y)
        mse += d * d
    mse /= fa.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_kernel_naive(size, sigma):
    half = (size - 1) / 2.0
    k = np.zeros((size, size), dtype=np.float64)
    for i in range(size):
        for j in range(size):
            di, dj = i - half, j - half
            k[i, j] = math.exp(-(di * di) / (2 * sigma * sigma)) * \
                math.exp(-(dj * dj) / (2 * sigma * sigma))
    return k / k.sum()


def ssim_naive(a, b, max_val, window=11, sigma=1.5):
    """Per-window loops over valid positions; same contract as the library:
    the window shrinks to the largest odd size fitting the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    _, w, h = a.shape
    k = min(window, w, h)
    if k % 2 == 0:
        k -= 1
    kern = gaussian_kernel_naive(k, sigma)
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(w - k + 1):
            for j in range(h - k + 1):
                wa = a[c, i:i + k, j:j + k]
                wb = b[c, i:i + k, j:j + k]
                mu_a = (wa * kern).sum()
                mu_b = (wb * kern).sum()
                va = (wa * wa * kern).sum() - mu_a * mu_a
                vb = (wb * wb * kern).sum() - mu_b * mu_b
                cov = (wa * wb * kern).sum() - mu_a * mu_b
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
                vals.append(num / den)
    return sum(vals) / len(vals)


def sam_naive(a, b):
    """Mean spectral angle in degrees via per-pixel arccos loops."""
    c, w, h = a.shape
    total = 0.0
    for i in range(w):
        for j in range(h):
            u = np.asarray(a[:, i, j], dtype=np.float64)
            v = np.asarray(b[:, i, j], dtype=np.float64)
            cos = float(u @ v / (math.sqrt(u @ u) * math.sqrt(v @ v)))
            cos = min(1.0, max(-1.0, cos))
            total += math.degrees(math.acos(cos))
    return total / (w * h)


def ssi_naive(original, filtered):
    out = []
    for c in range(original.shape[0]):
        o = np.asarray(original[c], dtype=np.float64).reshape(-1)
        f = np.asarray(filtered[c], dtype=np.float64).reshape(-1)
        mu_o, mu_f = o.mean(), f.mean()
        cv_o = o.std() / abs(mu_o)
        cv_f = f.std() / abs(mu_f)
        out.append(cv_f / cv_o)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# sparse routing

def moe_dispatch_naive(x, gate_w, experts, capacity_factor):
    """Exhaustive dispatch oracle over raw arrays.

    Every routing decision is re-derived with explicit loops: argmax with
    lowest-index tie break, capacity truncation in arrival order, gate
    scaling and zero rows for dropped tokens.  The expert feed-forward math
    runs on the same kept-row batches the library builds, so a correct
    implementation matches bit for bit.

    Returns (combined, aux, kept_counts, dropped_tokens).
    """
    n, _ = x.shape
    num_experts = len(experts)
    logits = x @ gate_w
    shift = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - shift)
    probs = e / e.sum(axis=-1, keepdims=True)

    assign = []
    for t in range(n):
        best, best_p = 0, probs[t, 0]
        for j in range(1, num_experts):
            if probs[t, j] > best_p:
                best, best_p = j, probs[t, j]
        assign.append(best)

    capacity = max(1, int(math.floor(capacity_factor * n / num_experts)))
    kept = {j: [] for j in range(num_experts)}
    dropped = []
    for t in range(n):
        j = assign[t]
        if len(kept[j]) < capacity:
            kept[j].append(t)
        else:
            dropped.append(t)

    combined = np.zeros_like(x)
    for j in range(num_experts):
        rows = kept[j]
        if not rows:
            continue
        xe = x[np.asarray(rows, dtype=np.intp)]
        h = xe @ experts[j]["w1"] + experts[j]["b1"].reshape(1, -1)
        h = (h * (0.5 * (1.0 + erf(h * (1.0 / np.sqrt(2.0)))))).astype(h.dtype)
        ye = h @ experts[j]["w2"] + experts[j]["b2"].reshape(1, -1)
        for row, t in enumerate(rows):
            combined[t] = ye[row] * probs[t, j]

    counts = np.zeros(num_experts, dtype=np.int64)
    for t in range(n):
        counts[assign[t]] += 1
    fractions = (counts / float(n)).astype(probs.dtype)
    mean_prob = probs.mean(axis=0)
    aux = float((mean_prob * fractions).sum() * float(num_experts))
    return combined, aux, tuple(len(kept[j]) for j in range(num_experts)), dropped


# ---------------------------------------------------------------------------
# small forward-pass oracles

def conv_patch_naive(image, kernel):
    """Per-patch, per-filter dot-product loops."""
    c, w, h = image.shape
    d, _, p, _ = kernel.shape
    wb, hb = w // p, h // p
    out = np.zeros((wb * hb, d), dtype=np.float64)
    for bi in range(wb):
        for bj in range(hb):
            patch = image[:, bi * p:(bi + 1) * p, bj * p:(bj + 1) * p]
            for f in range(d):
                out[bi * hb + bj, f] = float(
                    (np.asarray(patch, dtype=np.float64) *
                     np.asarray(kernel[f], dtype=np.float64)).sum()
                )
    return out


def masked_l1_naive(pred, target, mask):
    """Mean |pred-target| over mask-selected pixels of every channel."""
    total = 0.0
    count = 0
    c = pred.shape[0]
    for ch in range(c):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                if mask[i, j]:
                    total += abs(float(pred[ch, i, j]) - float(target[ch, i, j]))
                    count += 1
    return total / count


def adamw_naive(w, grads, lr, beta1, beta2, eps, weight_decay, decay_applies):
    """Sequential AdamW trajectory over a list of per-step gradients."""
    w = np.asarray(w, dtype=np.float64).copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for step, g in enumerate(grads):
        t = step + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        update = mhat / (np.sqrt(vhat) + eps)
        if decay_applies:
            update = update + weight_decay * w
        w = w - lr * update
    return w
