"""Residual scaling of the squared-loss expansion for a random 1-D sigmoid pair.

Independent of the package: forward passes in numpy, expectation by a dense
trapezoid rule on [-12 sigma, 12 sigma], derivatives by central differences.
Run directly to print the frozen slope used in tests/test_noise_lab.py.
"""
import numpy as np

SIGMAS = np.array([0.2, 0.1, 0.05, 0.025])
POINT = 0.4


def pair_params(seed=7):
    """Parameter dicts (package naming) of a [1, 4, 1] sigmoid teacher and student."""
    rng = np.random.default_rng(seed)
    out = []
    for scale in (1.0, 1.5):
        w1, b1 = rng.normal(size=4) * scale, rng.normal(size=4)
        w2, b2 = rng.normal(size=4), rng.normal()
        out.append({"trunk.0.weight": w1[:, None], "trunk.0.bias": b1,
                    "head.out.weight": w2[None, :], "head.out.bias": np.array([b2])})
    return out


def forward(p, x):
    h = 1 / (1 + np.exp(-(np.multiply.outer(x, p["trunk.0.weight"][:, 0]) + p["trunk.0.bias"])))
    return h @ p["head.out.weight"][0] + p["head.out.bias"][0]


def residuals(x=POINT, sigmas=SIGMAS):
    pt, ps = pair_params()
    d = lambda z: forward(pt, z) - forward(ps, z)
    h = 1e-5
    slope = (d(np.array(x + h)) - d(np.array(x - h))) / (2 * h)
    z = np.linspace(-12, 12, 200001)
    pdf = np.exp(-z ** 2 / 2) / np.sqrt(2 * np.pi)
    out = []
    for sg in sigmas:
        expected = np.trapezoid(d(x + sg * z) ** 2 * pdf, z)
        out.append(abs(expected - (d(np.array(x)) ** 2 + sg ** 2 * slope ** 2)))
    return np.array(out)


if __name__ == "__main__":
    r = residuals()
    print("residuals", r.tolist())
    print("slope", np.polyfit(np.log(SIGMAS), np.log(r), 1)[0])
