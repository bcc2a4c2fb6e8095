"""Local linearity of the loss around an input.

For a per-example loss l(.) the linearity gap at a perturbation d is

    g(d; x) = | l(x + d) - l(x) - d . grad_x l(x) |

and the local linearity measure gamma(eps, x) is its maximum over the
l-infinity ball of radius eps, estimated by projected Adam ascent.

Most functions come in two layers: a core taking ``loss_fn`` (a callable
mapping a batched input node to per-example losses) and a model-level wrapper
taking ``(spec, params, x, y)``.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from llr import autodiff as ad
from llr import models
from llr.attacks import project_linf
from llr.errors import ContractError

HIST_BINS = 50


def model_loss_fn(spec, params, y, kind="cross_entropy"):
    y = np.asarray(y, dtype=np.float64)
    return lambda xn: models.loss(spec, params, xn, y, kind)


def _flat_dot(a, b, batched):
    """Per-example inner product of two nodes over all non-batch axes."""
    prod = a * b
    if not batched:
        return ad.sum_(prod)
    return ad.sum_(prod, axis=tuple(range(1, prod.ndim)))


def gap_terms(loss_fn, x, delta):
    """Recorded pieces of the linearity gap.

    Returns ``(gap, dot, loss_x, loss_xd)``: the per-example nodes
    |l(x+d) - l(x) - d.grad l(x)|, d.grad l(x), l(x) and l(x+d).  The input
    gradient is recorded, so everything is differentiable with respect to the
    parameters and to ``delta``.  ``delta`` may have the full batch shape or
    the per-example shape (one perturbation shared by the whole batch).
    """
    xn = ad.as_node(x)
    d = ad.as_node(delta)
    lx = loss_fn(xn)
    batched = lx.ndim == 1
    gx = ad.grad(ad.sum_(lx), xn, create_graph=True)
    dot = _flat_dot(d, gx, batched)
    lxd = loss_fn(xn + d)
    return ad.abs_(lxd - lx - dot), dot, lx, lxd


def linearity_gap(spec, params, x, y, delta, kind="cross_entropy"):
    """g(delta; x) for one example or a batch, as a differentiable node."""
    gap, _, _, _ = gap_terms(model_loss_fn(spec, params, y, kind), x, delta)
    return gap


def _loss_and_grad(loss_fn, x):
    xn = ad.leaf(x)
    lx = loss_fn(xn)
    return lx.value, ad.grad(ad.sum_(lx), xn)


def maximize_gap(loss_fn, x, epsilon, delta0, steps=50, step_size=0.1, optimizer="adam", box=None,
                 shared=False, betas=(0.9, 0.999), adam_eps=1e-8):
    """Projected ascent on the linearity gap starting from ``delta0``.

    With ``shared=False`` every example has its own perturbation and the best
    visited value per example is returned as ``(gaps, deltas)``.  With
    ``shared=True`` one perturbation (per-example shape) ascends the batch mean
    gap and the *final* iterate is returned, along with the per-example gaps
    at that iterate.
    """
    x = np.asarray(x, dtype=np.float64)
    lx, gx = _loss_and_grad(loss_fn, x)
    n = len(x)
    axes = tuple(range(1, x.ndim))
    delta = project_linf(np.array(delta0, dtype=np.float64), epsilon, None if shared else x,
                         None if shared else box)
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    best_gap = np.full(n, -np.inf)
    best_delta = np.broadcast_to(delta, x.shape).copy()
    gaps = None
    for k in range(steps + 1):
        xa = ad.leaf(x + delta)
        la = loss_fn(xa)
        raw = la.value - lx - np.sum(delta * gx, axis=axes)
        gaps = np.abs(raw)
        if not shared:
            better = gaps > best_gap
            best_gap[better] = gaps[better]
            best_delta[better] = delta[better]
        if k == steps:
            break
        ga = ad.grad(ad.sum_(la), xa)
        sign = np.sign(raw).reshape((n,) + (1,) * len(axes))
        g = sign * (ga - gx)
        if shared:
            g = np.mean(g, axis=0)
        if optimizer == "sign":
            update = np.sign(g)
        else:
            m = betas[0] * m + (1 - betas[0]) * g
            v = betas[1] * v + (1 - betas[1]) * g * g
            update = (m / (1 - betas[0] ** (k + 1))) / (np.sqrt(v / (1 - betas[1] ** (k + 1))) + adam_eps)
        delta = project_linf(delta + step_size * update, epsilon, None if shared else x, None if shared else box)
    if shared:
        return gaps, delta
    return best_gap, best_delta


def local_linearity(loss_fn, x, epsilon, steps=50, step_size=0.1, optimizer="adam", restarts=1, seed=0,
                    box=None, offset=0):
    """Estimate gamma(eps, x) and its maximizer per example.

    Each (example, restart) pair starts from its own uniform draw in the
    eps-cube, keyed on ``offset + i`` so chunked callers get the same streams.
    Returns ``(gamma, delta_llr)``.
    """
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    gamma = np.full(n, -np.inf)
    arg = np.zeros_like(x)
    for r in range(restarts):
        d0 = np.empty_like(x)
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence((seed, offset + i, r, 0)))
            d0[i] = rng.uniform(-epsilon, epsilon, size=x.shape[1:])
        g, d = maximize_gap(loss_fn, x, epsilon, d0, steps, step_size, optimizer, box)
        better = g > gamma
        gamma[better] = g[better]
        arg[better] = d[better]
    return gamma, arg


def model_local_linearity(spec, params, x, y, epsilon, kind="cross_entropy", **kwargs):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = x.shape == spec.input_shape
    if single:
        x, y = x[None], y[None]
    gamma, delta = local_linearity(model_loss_fn(spec, params, y, kind), x, epsilon, **kwargs)
    return (gamma[0], delta[0]) if single else (gamma, delta)


# ------------------------------------------------------------- GGN model


def _batch(spec, x, y, delta):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    single = x.shape == spec.input_shape
    if single:
        x, y = x[None], y[None]
    delta = np.broadcast_to(delta, x.shape).copy()
    return x, y, delta, single


def ggn_quadratic_form(spec, params, x, y, delta, kind="cross_entropy"):
    """delta^T G(x) delta with G = J^T H J, using a forward-mode J delta.

    H is the identity for squared error and diag(p) - p p^T for softmax
    cross-entropy.
    """
    if kind not in models.LOSS_KINDS:
        raise ContractError(f"unsupported loss kind {kind!r}")
    x, y, delta, single = _batch(spec, x, y, delta)
    xn = ad.leaf(x)
    z = models.logits(spec, params, xn)
    dz = ad.jvp(z, xn, delta)
    if kind == "squared_error":
        q = np.sum(dz * dz, axis=1)
    else:
        p = models.softmax(z.value)
        q = np.sum(p * dz * dz, axis=1) - np.sum(p * dz, axis=1) ** 2
    return q[0] if single else q


@dataclass
class _Pieces:
    loss_x: np.ndarray
    loss_xd: np.ndarray
    dot: np.ndarray
    quad: np.ndarray

    @property
    def gap(self):
        return np.abs(self.loss_xd - self.loss_x - self.dot)

    @property
    def residual(self):
        return self.loss_xd - self.loss_x - self.dot - 0.5 * self.quad


def _pieces(spec, params, x, y, delta, kind):
    fn = model_loss_fn(spec, params, y, kind)
    lx, gx = _loss_and_grad(fn, x)
    with ad.no_record():
        lxd = fn(ad.leaf(x + delta)).value
    dot = np.sum((delta * gx).reshape(len(x), -1), axis=1)
    quad = ggn_quadratic_form(spec, params, x, y, delta, kind)
    return _Pieces(lx, lxd, dot, quad)


def quadratic_residual(spec, params, x, y, delta, kind="cross_entropy"):
    """Signed error of the GGN quadratic model l(x) + d.grad + d^T G d / 2."""
    x, y, delta, single = _batch(spec, x, y, delta)
    r = _pieces(spec, params, x, y, delta, kind).residual
    return r[0] if single else r


@dataclass
class BoundCheck:
    """Per-example slack of the three bounds at a given perturbation.

    ``slack1``: |dl| <= |d.grad| + g, on cross-entropy.
    ``slack2``: |d.grad| <= 2 sqrt(2 l (g + |res|)), on squared error.
    ``slack3``: |d.grad| <= sqrt(2 / (y.p) (g + |res|)), on cross-entropy.
    """

    slack1: np.ndarray
    slack2: np.ndarray
    slack3: np.ndarray
    bound1: np.ndarray
    bound2: np.ndarray
    bound3: np.ndarray
    target_prob: np.ndarray
    flagged: np.ndarray

    def tolerance(self, rel=1e-9):
        return [rel * (1.0 + np.abs(np.where(np.isfinite(b), b, 0.0))) for b in (self.bound1, self.bound2, self.bound3)]

    def min_scaled_slack(self):
        """Smallest slack / (1 + |bound|) for each bound (must stay >= -1e-9)."""
        out = []
        for s, b in ((self.slack1, self.bound1), (self.slack2, self.bound2), (self.slack3, self.bound3)):
            ok = np.isfinite(s)
            out.append(float(np.min(s[ok] / (1.0 + np.abs(b[ok])))) if np.any(ok) else np.inf)
        return tuple(out)

    def holds(self, rel=1e-9):
        return all(v >= -rel for v in self.min_scaled_slack())


def check_propositions(spec, params, x, y, epsilon, delta):
    """Evaluate the linearity upper bound and the two gradient-term bounds at ``delta``."""
    x, y, delta, single = _batch(spec, x, y, delta)
    if np.max(np.abs(delta)) > epsilon * (1 + 1e-12):
        raise ContractError("delta lies outside the epsilon ball")
    ce = _pieces(spec, params, x, y, delta, "cross_entropy")
    se = _pieces(spec, params, x, y, delta, "squared_error")

    bound1 = np.abs(ce.dot) + ce.gap
    slack1 = bound1 - np.abs(ce.loss_xd - ce.loss_x)

    bound2 = 2.0 * np.sqrt(2.0 * se.loss_x * (se.gap + np.abs(se.residual)))
    slack2 = bound2 - np.abs(se.dot)

    z = models.evaluate_logits(spec, params, x)
    target_prob = np.sum(models.softmax(z) * y, axis=1)
    flagged = target_prob <= np.finfo(np.float64).tiny
    with np.errstate(divide="ignore"):
        bound3 = np.where(flagged, np.inf, np.sqrt(2.0 / np.where(flagged, 1.0, target_prob)
                                                   * (ce.gap + np.abs(ce.residual))))
    slack3 = bound3 - np.abs(ce.dot)
    out = BoundCheck(slack1, slack2, slack3, bound1, bound2, bound3, target_prob, flagged)
    if single:
        out = BoundCheck(*(np.asarray(getattr(out, f)[0]) for f in BoundCheck.__dataclass_fields__))
    return out


# ---------------------------------------------------------------- reports


@dataclass
class LinearityReport:
    epsilon: float
    labels: np.ndarray
    gamma: np.ndarray
    delta_llr: np.ndarray
    grad_dot: np.ndarray
    residual: np.ndarray
    bounds: BoundCheck
    hist_range: tuple = None
    meta: dict = field(default_factory=dict)

    @property
    def sqrt_gamma(self):
        return np.sqrt(np.maximum(self.gamma, 0.0))

    def histogram(self):
        lo, hi = self.hist_range or (0.0, float(np.max(self.sqrt_gamma)) if len(self.gamma) else 1.0)
        if hi <= lo:
            hi = lo + 1.0
        counts, edges = np.histogram(self.sqrt_gamma, bins=HIST_BINS, range=(lo, hi))
        return counts, edges

    def summary(self):
        counts, edges = self.histogram()
        q1, med, q3 = np.percentile(self.gamma, [25, 50, 75]) if len(self.gamma) else (np.nan,) * 3
        return {
            "epsilon": self.epsilon,
            "examples": int(len(self.gamma)),
            "gamma_median": float(med),
            "gamma_q1": float(q1),
            "gamma_q3": float(q3),
            "gamma_mean": float(np.mean(self.gamma)) if len(self.gamma) else float("nan"),
            "sqrt_gamma_hist": {"bins": HIST_BINS, "edges": edges.tolist(), "counts": counts.tolist()},
            "min_scaled_slack": list(self.bounds.min_scaled_slack()),
            "flagged_low_target_prob": int(np.sum(self.bounds.flagged)),
            **self.meta,
        }

    CSV_COLUMNS = ("index", "label", "gamma", "sqrt_gamma", "abs_grad_dot", "residual",
                   "slack_prop1", "slack_prop2", "slack_prop3", "flagged")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            for i in range(len(self.gamma)):
                w.writerow([i, int(self.labels[i]), repr(float(self.gamma[i])), repr(float(self.sqrt_gamma[i])),
                            repr(float(abs(self.grad_dot[i]))), repr(float(self.residual[i])),
                            repr(float(self.bounds.slack1[i])), repr(float(self.bounds.slack2[i])),
                            repr(float(self.bounds.slack3[i])), int(self.bounds.flagged[i])])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def linearity_report(spec, params, x, labels, epsilon, steps=50, step_size=0.1, restarts=1, seed=0,
                     batch_size=256, hist_range=None):
    """gamma, delta_llr and bound diagnostics for a labelled batch."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    y = models.one_hot(labels, spec.num_classes)
    gammas, deltas = [], []
    for lo in range(0, len(x), batch_size):
        sl = slice(lo, lo + batch_size)
        fn = model_loss_fn(spec, params, y[sl])
        # offset the example index so streams do not depend on batch_size
        g, d = local_linearity(fn, x[sl], epsilon, steps, step_size, restarts=restarts, seed=seed, offset=lo)
        gammas.append(g)
        deltas.append(d)
    gamma = np.concatenate(gammas)
    delta = np.concatenate(deltas)
    pieces = _pieces(spec, params, x, y, delta, "cross_entropy")
    bounds = check_propositions(spec, params, x, y, epsilon, delta)
    return LinearityReport(epsilon, labels, gamma, delta, pieces.dot, pieces.residual, bounds, hist_range)

