"""Plain-numpy reference implementations used as independent oracles.

Nothing here touches the package's autodiff engine: forward passes are
re-implemented directly and derivatives come from central differences.
"""
import numpy as np


def mlp_forward(params, x, activation="relu", head="out"):
    """Forward pass of a package ``mlp`` network from its parameter dict."""
    h = np.asarray(x, dtype=np.float64)
    i = 0
    while f"trunk.{i}.weight" in params:
        h = params[f"trunk.{i}.weight"] @ h + params[f"trunk.{i}.bias"]
        h = np.maximum(h, 0.0) if activation == "relu" else 1.0 / (1.0 + np.exp(-h))
        i += 2
    return params[f"head.{head}.weight"] @ h + params[f"head.{head}.bias"]


def fd_jacobian(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = eps
        cols.append((f(x + e.reshape(x.shape)) - f(x - e.reshape(x.shape))) / (2 * eps))
    return np.stack(cols, axis=-1)


def softmax(z, temperature=1.0):
    z = np.asarray(z) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def noise_expansion_rhs(f_t, f_s, x, sigma):
    """sum_i (T^i - S^i)^2 + sigma^2 sum_i ||grad T^i - grad S^i||^2."""
    d = f_t(x) - f_s(x)
    jd = fd_jacobian(f_t, x) - fd_jacobian(f_s, x)
    return float(d @ d + sigma ** 2 * np.sum(jd ** 2))


def ce_expansion_rhs(f_t, f_s, x, sigma, temperature=1.0):
    """Soft-target CE plus its first-order noise term, by finite differences."""
    pt = lambda z: softmax(f_t(z), temperature)
    ps = lambda z: softmax(f_s(z), temperature)
    ce = -float(pt(x) @ np.log(ps(x)))
    jt = fd_jacobian(pt, x)
    js = fd_jacobian(ps, x)
    s = ps(x)
    return ce - sigma ** 2 * float(np.sum(np.sum(jt * js, axis=1) / np.maximum(s, 1e-8)))
