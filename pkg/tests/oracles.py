"""Independent reference computations used by the tests.

Nothing here touches the graph engine: plain numpy loops and hand-written
backpropagation only.
"""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def conv2d_direct(x, w, stride, pad):
    """Cross-correlation straight from the definition."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for p in range(ho):
                for q in range(wo):
                    patch = xp[b, :, p * stride : p * stride + kh, q * stride : q * stride + kw]
                    out[b, oc, p, q] = np.sum(patch * w[oc])
    return out


def softplus(a):
    return np.logaddexp(0.0, a)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def mlp_loss_and_input_grad(weights, biases, x, label):
    """Cross-entropy of a softplus MLP and its input gradient by manual backprop.

    ``weights[i]`` has shape (in, out); ``x`` is a single example vector.
    """
    pre, acts = [], [x]
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        pre.append(z)
        h = softplus(z) if i < len(weights) - 1 else z
        acts.append(h)
    z = acts[-1]
    m = np.max(z)
    lse = m + np.log(np.sum(np.exp(z - m)))
    loss = lse - z[label]
    p = np.exp(z - lse)
    g = p.copy()
    g[label] -= 1.0
    for i in range(len(weights) - 1, -1, -1):
        if i < len(weights) - 1:
            g = g * sigmoid(pre[i])
        g = weights[i] @ g
    return loss, g


def grid_gap_max(loss_at, grad_at_x, loss_x, epsilon, n=201):
    """max |l(x+d) - l(x) - d.grad| over an n x n grid of the 2-D eps-square."""
    a = np.linspace(-epsilon, epsilon, n)
    A, B = np.meshgrid(a, a, indexing="ij")
    D = np.stack([A.ravel(), B.ravel()], axis=1)
    vals = np.abs(loss_at(D) - loss_x - D @ grad_at_x)
    return float(vals.max())


def cifar_record(label, pixels):
    """Encode one record: label byte then 3072 pixel bytes (R plane, G plane, B plane)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    assert pixels.shape == (3, 32, 32)
    return bytes([label]) + pixels.tobytes()


def mlp_losses(weights, biases, X, label):
    """Cross-entropy of a softplus MLP for each row of ``X`` (forward only)."""
    h = X
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = softplus(h)
    m = np.max(h, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(h - m), axis=1))
    return lse - h[:, label]
