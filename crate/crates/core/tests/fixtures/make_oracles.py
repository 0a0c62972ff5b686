"""Independent numpy oracles for the synthetic scenario.

Regenerate with: python3 make_oracles.py > synthetic_oracles.json
"""
import json

import numpy as np
from scipy import integrate, stats

N_MC = 4_000_000
SEED = 20240611
NOISE_SD = 0.5
DOSES = [0.1, 0.25, 0.5, 0.75, 0.9]


def score(x):
    x1, x2, x3, x4, x5 = (x[:, k] for k in range(5))
    m123 = np.maximum(np.maximum(x1, x2), x3)
    m345 = np.maximum(np.maximum(x3, x4), x5)
    return (
        10.0 * (np.sin(m123) + m345**3) / (1.0 + (x1 + x5) ** 2)
        + np.sin(0.5 * x3) * (1.0 + np.exp(x4 - 0.5 * x3))
        + x3**2
        + 2.0 * np.sin(x4)
        + 2.0 * x5
        - 6.5
    )


def theta(x, a, family):
    gamma = 0.5 if family == "poisson" else -0.5
    m16 = np.maximum(x[:, 0], x[:, 5])
    idx = 2.0 * (a + gamma) * np.sin(x[:, 3]) * (a + 4.0 * m16**3) / (1.0 + 2.0 * x[:, 2] ** 2)
    return np.clip(idx, -4.0, 4.0) if family == "poisson" else idx


def mean_se(v):
    return {"value": float(v.mean()), "mc_se": float(v.std(ddof=1) / np.sqrt(len(v)))}


def dr_shift_bias(t, family, shift=0.5):
    """Population bias of the doubly robust estimator with exact propensity
    and outcome model shifted by `shift` on the canonical scale."""
    if family == "bernoulli":
        mu, mb = 1 / (1 + np.exp(-t)), 1 / (1 + np.exp(-(t + shift)))
        return mean_se(shift + (mu - mb) / (mb * (1 - mb)))
    return mean_se(shift + (np.exp(t) - np.exp(t + shift)) / np.exp(t + shift))


def p_treated(s):
    f = lambda e: stats.norm.pdf(e, scale=NOISE_SD) / (1.0 + np.exp(-(s + e)))
    return integrate.quad(f, -12 * NOISE_SD, 12 * NOISE_SD, epsabs=1e-14, epsrel=1e-13)[0]


def main():
    rng = np.random.default_rng(SEED)
    x = rng.random((N_MC, 6))
    out = {"n_mc": N_MC, "seed": SEED, "noise_sd": NOISE_SD, "families": {}}
    for fam in ["bernoulli", "poisson"]:
        t0, t1 = theta(x, 0.0, fam), theta(x, 1.0, fam)
        out["families"][fam] = {
            "binary": {
                "psi0": mean_se(t0),
                "psi1": mean_se(t1),
                "ate": mean_se(t1 - t0),
                "dr_bias_shift_half_arm1": dr_shift_bias(t1, fam),
            },
            "continuous": [{"a": a, **mean_se(theta(x, a, fam))} for a in DOSES],
        }
    pts = np.random.default_rng(SEED + 1).random((8, 6))
    s = score(pts)
    out["points"] = [
        {
            "x": p.tolist(),
            "score": float(si),
            "p_treated": p_treated(si),
            "density": [
                {"a": a, "value": float(stats.norm.pdf(np.log(a / (1 - a)), loc=si, scale=NOISE_SD) / (a * (1 - a)))}
                for a in DOSES
            ],
            "theta": {
                fam: [{"a": a, "value": float(theta(p[None, :], a, fam)[0])} for a in [0.0] + DOSES + [1.0]]
                for fam in ["bernoulli", "poisson"]
            },
        }
        for p, si in zip(pts, s)
    ]
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
