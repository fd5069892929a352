"""Shared independent oracles for the test suite.

The gradient checker here never looks at backward rules: it re-evaluates
the forward pass under central finite differences in float64 and compares
coordinate by coordinate against whatever backward produced.
"""

import numpy as np

from cosep import tensor as tc


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(build_loss, leaves, rng, probes=100, h=1e-3, rtol=1e-3):
    """Compare analytic grads of ``build_loss(leaves)`` with central differences.

    ``leaves`` are float64 Tensors with requires_grad set.  ``build_loss``
    must rebuild the graph from the leaves on every call (the perturbed
    forwards reuse it).  Returns the worst relative error seen.
    """
    for leaf in leaves:
        assert leaf.dtype == np.float64, "gradient checks run in float64"
        leaf.zero_grad()
    loss = build_loss()
    tc.backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    coords = []
    for li, leaf in enumerate(leaves):
        for flat in range(leaf.size):
            coords.append((li, flat))
    take = min(probes, len(coords))
    picked = [coords[i] for i in rng.choice(len(coords), size=take, replace=False)]

    worst = 0.0
    for li, flat in picked:
        leaf = leaves[li]
        base = leaf.data.reshape(-1)[flat]
        leaf.data.reshape(-1)[flat] = base + h
        up = build_loss().item()
        leaf.data.reshape(-1)[flat] = base - h
        down = build_loss().item()
        leaf.data.reshape(-1)[flat] = base
        numeric = (up - down) / (2 * h)
        err = rel_err(analytic[li].reshape(-1)[flat], numeric)
        worst = max(worst, float(err))
        assert err <= rtol, (
            f"gradient mismatch at leaf {li} coord {flat}: "
            f"analytic {analytic[li].reshape(-1)[flat]:.8g} vs numeric {numeric:.8g}")
    return worst


def inflate_kernel(w, dilation):
    """Zero-inflate a kernel so dilation-d conv equals dilation-1 conv."""
    F, C, kh, kw = w.shape
    nh = dilation * (kh - 1) + 1
    nw = dilation * (kw - 1) + 1
    out = np.zeros((F, C, nh, nw), dtype=w.dtype)
    out[:, :, ::dilation, ::dilation] = w
    return out


def brute_force_assignment(profit):
    """Exhaustive best injective rows->cols map; returns (best_map, best_profit)."""
    from itertools import permutations

    C, K = profit.shape
    best = None
    best_p = -np.inf
    for perm in permutations(range(K), C):
        p = sum(profit[c, perm[c]] for c in range(C))
        if p > best_p:
            best_p = p
            best = perm
    return list(best), best_p
