"""Independent oracles shared by the test suite.

Everything in here is deliberately written straight-line against numpy so it
shares no code with the library paths it checks.
"""

import numpy as np
from scipy.special import erf

from gfscl import numerics as nm


def finite_difference_grads(loss_fn, params, eps=1e-3):
    """Central-difference gradient of a scalar loss for each parameter array.

    ``params`` are the live numpy buffers the loss closure reads; each entry
    is perturbed in place, so ``loss_fn`` must recompute from scratch.
    """
    grads = []
    with nm.no_grad():
        for p in params:
            g = np.zeros_like(p)
            flat = p.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn()
                flat[i] = orig - eps
                lo = loss_fn()
                flat[i] = orig
                gf[i] = (hi - lo) / (2.0 * eps)
            grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, floor=1e-8):
    """Element-wise relative comparison, skipping entries tiny on both sides."""
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        keep = ~((np.abs(a) < floor) & (np.abs(n) < floor))
        if not keep.any():
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = (np.abs(a - n) / denom)[keep]
        worst = float(rel.max())
        assert worst <= rtol, f"gradient mismatch, worst relative error {worst:.3e}"


def gelu_ref(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax_ref(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm_ref(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def conv3x3_ref(tokens, kernel, bias):
    """Loop convolution over a square token grid with zero padding."""
    m, c_in = tokens.shape
    side = int(round(np.sqrt(m)))
    c_out = kernel.shape[3]
    grid = tokens.reshape(side, side, c_in)
    out = np.zeros((side, side, c_out), dtype=tokens.dtype)
    for i in range(side):
        for j in range(side):
            acc = np.zeros(c_out, dtype=tokens.dtype)
            for di in range(3):
                for dj in range(3):
                    ii, jj = i + di - 1, j + dj - 1
                    if 0 <= ii < side and 0 <= jj < side:
                        acc += grid[ii, jj] @ kernel[di, dj]
            out[i, j] = acc + bias
    return out.reshape(m, c_out)


def vit_forward_ref(images, params, num_layers, num_heads):
    """Straight-line transformer forward mirroring the backbone arithmetic.

    ``params`` is the {name: ndarray} dump of a backbone; returns the final
    post-norm class-token features, shape (B, D).
    """
    patch_w = params["patch/weight"]
    patch_b = params["patch/bias"]
    cls = params["cls_token"]
    pos = params["pos_embedding"]
    d = patch_w.shape[1]
    head_dim = d // num_heads

    batch = images.shape[0]
    tokens = images @ patch_w + patch_b  # images already flattened to patches
    cls_rep = np.broadcast_to(cls, (batch, 1, d))
    x = np.concatenate([cls_rep, tokens], axis=1) + pos

    for layer in range(num_layers):
        p = f"layer{layer}/"
        a1 = layer_norm_ref(x, params[p + "ln1/gain"], params[p + "ln1/bias"])
        q = a1 @ params[p + "attn/wq"] + params[p + "attn/bq"]
        k = a1 @ params[p + "attn/wk"] + params[p + "attn/bk"]
        v = a1 @ params[p + "attn/wv"] + params[p + "attn/bv"]
        t = a1.shape[1]

        def split(z):
            return z.reshape(batch, t, num_heads, head_dim).transpose(0, 2, 1, 3)

        qh, kh, vh = split(q), split(k), split(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(head_dim)
        attn = softmax_ref(scores, axis=-1)
        mixed = (attn @ vh).transpose(0, 2, 1, 3).reshape(batch, t, d)
        attended = mixed @ params[p + "attn/wo"] + params[p + "attn/bo"]
        x = x + attended

        a2 = layer_norm_ref(x, params[p + "ln2/gain"], params[p + "ln2/bias"])
        hidden = gelu_ref(a2 @ params[p + "ffn/w1"] + params[p + "ffn/b1"])
        x = x + (hidden @ params[p + "ffn/w2"] + params[p + "ffn/b2"])

    final = layer_norm_ref(x, params["final_norm/gain"], params["final_norm/bias"])
    return final[:, 0, :]


def adapter_forward_ref(tokens, down_w, down_b, conv_k, conv_b, up_w, up_b):
    """One adapter branch: 1x1 down, 3x3 grid conv (class token skips it),
    GELU, 1x1 up. ``tokens`` is (T, D) with the class token first."""
    down = tokens @ down_w + down_b
    cls_part = down[:1]
    patch_part = conv3x3_ref(down[1:], conv_k, conv_b)
    merged = np.concatenate([cls_part, patch_part], axis=0)
    return gelu_ref(merged) @ up_w + up_b


def pairwise_cosine_penalty_ref(outputs, slack):
    """Brute-force loose cosine penalty over unordered adapter pairs."""
    total = 0.0
    count = len(outputs)
    for a in range(count):
        for b in range(a + 1, count):
            ha, hb = outputs[a], outputs[b]
            per_token = []
            for m in range(ha.shape[0]):
                na, nbn = np.linalg.norm(ha[m]), np.linalg.norm(hb[m])
                cos = 0.0 if na == 0.0 or nbn == 0.0 else float(ha[m] @ hb[m] / (na * nbn))
                per_token.append(max(cos - slack, 0.0))
            total += float(np.mean(per_token))
    return total


def pairwise_contrastive_ref(features, pair_of, tau, metric="euclidean"):
    """Double-loop anchor/candidate contrastive loss."""
    t = len(features)
    losses = []
    for m in range(t):
        dm_pos = _dist_ref(features[m], features[pair_of[m]], metric)
        denom = 0.0
        for other in range(t):
            if other == m:
                continue
            denom += np.exp(-_dist_ref(features[m], features[other], metric) / tau)
        losses.append(-np.log(np.exp(-dm_pos / tau) / denom))
    return float(np.mean(losses))


def _dist_ref(a, b, metric):
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(a @ b / (na * nb))
