"""Randomized checks of the three linearity bounds on fresh networks."""

from dataclasses import dataclass

import numpy as np

from llr import linearity, models


@dataclass
class BoundTrials:
    trials: int
    min_scaled_slack: tuple
    flagged: int

    @property
    def holds(self):
        return all(s >= -1e-9 for s in self.min_scaled_slack)

    def summary(self):
        return {"trials": self.trials, "min_scaled_slack": list(self.min_scaled_slack),
                "flagged_low_target_prob": self.flagged, "tolerance": 1e-9, "holds": self.holds}


def random_trial(rng):
    """One (network, input, label, radius, perturbation) draw."""
    d = int(rng.integers(1, 7))
    c = int(rng.integers(2, 6))
    hidden = tuple(int(h) for h in rng.integers(2, 12, size=int(rng.integers(0, 3))))
    spec = models.mlp(d, hidden, c)
    params = models.init_params(spec, int(rng.integers(2**31)))
    scale = float(rng.choice([0.5, 1.0, 3.0]))
    params.tensors = {k: v * scale + (rng.normal(size=v.shape) * 0.1 if k.endswith(".bias") else 0.0)
                      for k, v in params.tensors.items()}
    x = rng.uniform(-1, 1, size=d)
    label = int(rng.integers(c))
    eps = float(10.0 ** rng.uniform(-3, 0))
    kind = rng.integers(3)
    if kind == 0:
        delta = rng.uniform(-eps, eps, size=d)
    elif kind == 1:
        delta = eps * rng.choice([-1.0, 1.0], size=d)
    else:
        delta = np.zeros(d)
    return spec, params, x, label, eps, delta


def bound_trials(trials, seed=0):
    rng = np.random.default_rng(seed)
    mins = [np.inf, np.inf, np.inf]
    flagged = 0
    for _ in range(trials):
        spec, params, x, label, eps, delta = random_trial(rng)
        y = models.one_hot(label, spec.num_classes)
        check = linearity.check_propositions(spec, params, x, y, eps, delta)
        mins = [min(a, b) for a, b in zip(mins, check.min_scaled_slack())]
        flagged += int(check.flagged)
    return BoundTrials(trials, tuple(float(m) for m in mins), flagged)
