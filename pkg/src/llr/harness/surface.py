"""Loss on a 2-D slice through an input: one adversarial and one random direction."""

import csv
from dataclasses import dataclass

import numpy as np

from llr import models
from llr.attacks import pgd_attack
from llr.errors import ContractError

MAX_COSINE = 0.5


@dataclass
class SurfaceGrid:
    center: np.ndarray
    label: int
    u: np.ndarray
    v: np.ndarray
    coords: np.ndarray  # the n values shared by both axes, spanning [-1, 1]
    losses: np.ndarray  # losses[i, j] is the loss at center + coords[i] * u + coords[j] * v

    @property
    def n(self):
        return len(self.coords)

    def center_loss(self):
        mid = self.n // 2
        return self.losses[mid, mid]

    def plane_residual(self):
        """Max absolute deviation of the grid from its least-squares plane."""
        a, b = np.meshgrid(self.coords, self.coords, indexing="ij")
        design = np.stack([a.ravel(), b.ravel(), np.ones(a.size)], axis=1)
        coef, *_ = np.linalg.lstsq(design, self.losses.ravel(), rcond=None)
        return float(np.max(np.abs(design @ coef - self.losses.ravel())))

    def rows(self):
        for i, a in enumerate(self.coords):
            for j, b in enumerate(self.coords):
                yield float(a), float(b), float(self.losses[i, j])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("a", "b", "loss"))
            for a, b, loss in self.rows():
                w.writerow((repr(a), repr(b), repr(loss)))


def _random_direction(u, epsilon, rng):
    flat_u = u.ravel()
    nu = np.linalg.norm(flat_u)
    for _ in range(1000):
        v = epsilon * rng.choice([-1.0, 1.0], size=u.shape)
        if nu == 0 or abs(flat_u @ v.ravel()) / (nu * np.linalg.norm(v)) <= MAX_COSINE:
            return v
    raise ContractError("could not draw a random direction weakly correlated with the adversarial one")


def _cross_entropy(z, labels):
    top = np.max(z, axis=1)
    lse = top + np.log(np.sum(np.exp(z - top[:, None]), axis=1))
    return lse - z[np.arange(len(z)), labels]


def surface_grid(spec, params, x, label, epsilon, n, attack_cfg, seed=0, batch_size=512, loss_fn=None):
    """Loss (cross-entropy unless ``loss_fn(logits, labels)`` is given) on the (n x n) grid x + a*u + b*v with a, b in [-1, 1].

    ``u`` is the attack's perturbation rescaled to l-infinity norm epsilon;
    ``v`` is a random sign pattern times epsilon, redrawn while its cosine
    with ``u`` exceeds 0.5 in absolute value.
    """
    if n < 3 or n % 2 == 0:
        raise ContractError(f"grid size must be odd and >= 3, got {n}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ContractError("surface_grid takes a single example")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F)))
    u = pgd_attack(spec, params, x, [label], attack_cfg).deltas[0]
    peak = np.max(np.abs(u))
    if peak == 0:
        u = epsilon * rng.choice([-1.0, 1.0], size=x.shape)
    else:
        u = u * (epsilon / peak)
    v = _random_direction(u, epsilon, rng)

    coords = np.linspace(-1.0, 1.0, n)
    coords[n // 2] = 0.0
    a, b = np.meshgrid(coords, coords, indexing="ij")
    points = x + a.reshape(-1, *(1,) * x.ndim) * u + b.reshape(-1, *(1,) * x.ndim) * v
    labels = np.full(len(points), label)
    z = models.evaluate_logits(spec, params, points, batch_size)
    losses = (loss_fn or _cross_entropy)(z, labels)
    return SurfaceGrid(x, int(label), u, v, coords, losses.reshape(n, n))
