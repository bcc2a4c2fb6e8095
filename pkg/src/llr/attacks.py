"""l-infinity gradient attacks: PGD with Adam or sign steps, margin losses,
random restarts and the robustness metrics.

The attack *ascends* its loss.  Every (example, restart, target) triple draws
its starting point from its own RNG stream keyed by
``(seed, example index, restart, target slot)``, so how examples are chunked
into batches never changes which starting points are used.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from llr import autodiff as ad
from llr.errors import ConfigError, ContractError
from llr.models import cross_entropy, logits, one_hot

LOSS_KINDS = ("untargeted", "random_targeted", "multi_targeted", "cross_entropy")
OPTIMIZERS = ("adam", "sign")


def default_schedule(steps, loss="untargeted"):
    """Step-size schedule as ((threshold, eta), ...); eta applies while step < threshold.

    Untargeted and random-targeted attacks use 0.1 / 0.01 / 0.001 over the first
    half, next quarter and last quarter of the steps (100/150/200 at 200 steps).
    Multi-targeted attacks use a constant 0.1.
    """
    if loss == "multi_targeted":
        return ((steps, 0.1),)
    t1 = max(1, round(steps * 0.5))
    t2 = max(t1 + 1, round(steps * 0.75))
    t3 = max(t2 + 1, steps)
    return ((t1, 0.1), (t2, 0.01), (t3, 0.001))


def step_size(schedule, k):
    for threshold, eta in schedule:
        if k < threshold:
            return eta
    return schedule[-1][1]


@dataclass
class AttackConfig:
    epsilon: float
    loss: str = "untargeted"
    steps: int = 200
    optimizer: str = "adam"
    schedule: tuple = None
    restarts: int = 1
    box: tuple = (0.0, 1.0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init: str = "uniform"
    seed: int = 0
    target_seed: int = None
    early_stop: bool = True
    batch_size: int = 256

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.steps < 1 or self.restarts < 1:
            raise ContractError("steps and restarts must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"unknown attack loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("uniform", "zero"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.schedule is None:
            self.schedule = default_schedule(self.steps, self.loss)
        self.schedule = tuple((int(t), float(e)) for t, e in self.schedule)
        thresholds = [t for t, _ in self.schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])) or thresholds[-1] < self.steps:
            raise ContractError(f"schedule thresholds must increase strictly and end >= steps: {self.schedule}")
        if self.box is not None:
            self.box = (float(self.box[0]), float(self.box[1]))
        if self.target_seed is None:
            self.target_seed = self.seed

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [list(p) for p in self.schedule]
        d["box"] = list(self.box) if self.box is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"attack: unknown key(s) {sorted(extra)}")
        d = dict(d)
        if d.get("schedule") is not None:
            d["schedule"] = tuple(tuple(p) for p in d["schedule"])
        if d.get("box") is not None:
            d["box"] = tuple(d["box"])
        return cls(**d)


@dataclass
class AttackOutcome:
    deltas: np.ndarray
    losses: np.ndarray
    success: np.ndarray
    correct: np.ndarray
    best_restart: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    epsilon: float
    kind: str
    diagnostics: list = field(default_factory=list)

    @property
    def adversarial_accuracy(self):
        return float(np.mean(self.correct)) if len(self.correct) else 0.0

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self.success) else 0.0

    def summary(self):
        return {
            "attack": self.kind,
            "epsilon": self.epsilon,
            "examples": int(len(self.labels)),
            "adversarial_accuracy": self.adversarial_accuracy,
            "attack_success_rate": self.success_rate,
            "mean_attack_loss": float(np.mean(self.losses)) if len(self.losses) else 0.0,
            "aborted_restarts": len(self.diagnostics),
        }

    CSV_COLUMNS = ("index", "label", "target", "success", "correct", "attack_loss", "restart", "linf")

    def rows(self):
        linf = np.max(np.abs(self.deltas.reshape(len(self.labels), -1)), axis=1) if len(self.labels) else []
        for i in range(len(self.labels)):
            yield {
                "index": i,
                "label": int(self.labels[i]),
                "target": int(self.targets[i]),
                "success": int(self.success[i]),
                "correct": int(self.correct[i]),
                "attack_loss": repr(float(self.losses[i])),
                "restart": int(self.best_restart[i]),
                "linf": repr(float(linf[i])),
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def project_linf(delta, epsilon, x=None, box=None):
    """Clamp ``delta`` into the epsilon-cube and, if given, keep x + delta inside ``box``."""
    delta = np.clip(delta, -epsilon, epsilon)
    if box is not None:
        lo, hi = box
        delta = np.clip(x + delta, lo, hi) - x
    return delta


def _strongest_other(z, t):
    masked = np.array(z, dtype=np.float64, copy=True)
    np.put_along_axis(masked, t[:, None], -np.inf, axis=1)
    return np.argmax(masked, axis=1)


def margin_loss(z, t, kind="untargeted", target=None):
    """Logit margin attack loss: f_s - f_t (untargeted) or f_r - f_t (targeted).

    ``z`` is a logits node of shape (C,) or (N, C).  For the untargeted loss
    ``s`` is the strongest wrong class at the current logits.
    """
    z = ad.as_node(z)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, -1))
    c = z.shape[1]
    if c < 2:
        raise ContractError("margin loss needs at least two classes")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if kind == "untargeted":
        s = _strongest_other(z.value, t)
    elif kind in ("random_targeted", "multi_targeted"):
        if target is None:
            raise ContractError(f"{kind} margin needs an explicit target class")
        s = np.atleast_1d(np.asarray(target, dtype=np.int64))
        if np.any(s == t):
            raise ContractError("target class must differ from the true class")
    else:
        raise ContractError(f"unknown margin kind {kind!r}")
    w = one_hot(s, c) - one_hot(t, c)
    out = ad.sum_(z * w, axis=1)
    return ad.reshape(out, ()) if single else out


def _example_loss(z, t, kind, targets):
    if kind == "cross_entropy":
        return cross_entropy(z, one_hot(t, z.shape[1]))
    if kind == "untargeted":
        return margin_loss(z, t, "untargeted")
    return margin_loss(z, t, "random_targeted", targets)


def _succeeded(zv, t, kind, targets):
    pred = np.argmax(zv, axis=1)
    if kind == "random_targeted":
        return pred == targets
    return pred != t


def _initial_delta(shape, cfg, keys):
    if cfg.init == "zero":
        return np.zeros((len(keys),) + shape)
    out = np.empty((len(keys),) + shape)
    for row, key in enumerate(keys):
        rng = np.random.default_rng(np.random.SeedSequence(key))
        out[row] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    return out


def _ascend_chunk(spec, params, x, t, targets, cfg, kind, keys):
    """One restart of projected ascent on a chunk; returns best (delta, loss, success) per row."""
    n = len(x)
    delta = project_linf(_initial_delta(spec.input_shape, cfg, keys), cfg.epsilon, x, cfg.box)
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    alive = np.ones(n, dtype=bool)
    best_delta = delta.copy()
    best_loss = np.full(n, -np.inf)
    best_succ = np.zeros(n, dtype=bool)
    aborted_at = np.full(n, -1)
    for k in range(cfg.steps + 1):
        xa = ad.leaf(x + delta)
        z = logits(spec, params, xa)
        per = _example_loss(z, t, kind, targets)
        lv = per.value
        if k < cfg.steps:
            g = ad.grad(ad.sum_(per), xa)
        finite = np.isfinite(lv)
        if k < cfg.steps:
            finite &= np.all(np.isfinite(g.reshape(n, -1)), axis=1)
        newly_bad = alive & ~finite
        aborted_at[newly_bad] = k
        alive &= finite
        succ = _succeeded(z.value, t, kind, targets) & alive
        better = alive & ((succ & ~best_succ) | ((succ == best_succ) & (lv > best_loss)))
        best_delta[better] = delta[better]
        best_loss[better] = lv[better]
        best_succ[better] = succ[better]
        if k == cfg.steps:
            break
        eta = step_size(cfg.schedule, k)
        g = np.where(alive.reshape((n,) + (1,) * (g.ndim - 1)), g, 0.0)
        if cfg.optimizer == "sign":
            update = np.sign(g)
        else:
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1 ** (k + 1))
            vhat = v / (1.0 - cfg.beta2 ** (k + 1))
            update = mhat / (np.sqrt(vhat) + cfg.adam_eps)
        delta = project_linf(delta + eta * update, cfg.epsilon, x, cfg.box)
    return best_delta, best_loss, best_succ, aborted_at


def _batched(spec, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        x = x[None]
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if len(t) != len(x):
        raise ContractError(f"{len(x)} inputs but {len(t)} labels")
    return x, t


def _run(spec, params, x, t, cfg, kind, targets, slot_of, ids=None):
    """Restart loop shared by every attack flavour.

    ``slot_of(i)`` gives the RNG target slot for row ``i``; ``ids`` maps rows to
    the example index used in RNG keys (defaults to the row itself).
    """
    n = len(x)
    ids = np.arange(n) if ids is None else ids
    deltas = np.zeros_like(x)
    losses = np.full(n, -np.inf)
    success = np.zeros(n, dtype=bool)
    restart_of = np.zeros(n, dtype=np.int64)
    diagnostics = []
    for r in range(cfg.restarts):
        todo = np.flatnonzero(~success) if cfg.early_stop else np.arange(n)
        for lo in range(0, len(todo), cfg.batch_size):
            idx = todo[lo : lo + cfg.batch_size]
            keys = [(cfg.seed, int(ids[i]), r, slot_of(int(i))) for i in idx]
            bd, bl, bs, ab = _ascend_chunk(spec, params, x[idx], t[idx], targets[idx], cfg, kind, keys)
            for j in np.flatnonzero(ab >= 0):
                diagnostics.append(
                    {"example": int(idx[j]), "restart": r, "target": int(targets[idx[j]]), "step": int(ab[j]),
                     "reason": "non-finite loss or gradient"}
                )
            better = (bs & ~success[idx]) | ((bs == success[idx]) & (bl > losses[idx]))
            sel = idx[better]
            deltas[sel] = bd[better]
            losses[sel] = bl[better]
            success[sel] = bs[better]
            restart_of[sel] = r
    return deltas, losses, success, restart_of, diagnostics


def _outcome(spec, params, x, t, deltas, losses, success, restart_of, targets, cfg, kind, diagnostics):
    z = np.concatenate(
        [_plain_logits(spec, params, x[i : i + cfg.batch_size] + deltas[i : i + cfg.batch_size])
         for i in range(0, len(x), cfg.batch_size)]
    ) if len(x) else np.zeros((0, spec.num_classes))
    correct = np.argmax(z, axis=1) == t
    return AttackOutcome(deltas, losses, success, correct, restart_of, t, targets, cfg.epsilon, kind, diagnostics)


def _plain_logits(spec, params, x):
    with ad.no_record():
        return logits(spec, params, x).value


def random_targets(t, num_classes, seed):
    """A fixed wrong class per example, drawn from its own stream."""
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i, 0x7A)))
        r = int(rng.integers(num_classes - 1))
        out[i] = r + (r >= ti)
    return out


def pgd_attack(spec, params, x, t, cfg):
    """Projected ascent with random restarts for the untargeted, random-targeted
    or cross-entropy loss of ``cfg``."""
    x, t = _batched(spec, x, t)
    if cfg.loss == "multi_targeted":
        return multi_targeted_attack(spec, params, x, t, cfg)
    if spec.num_classes < 2 and cfg.loss != "cross_entropy":
        raise ContractError("margin attacks need at least two classes")
    if cfg.loss == "random_targeted":
        targets = random_targets(t, spec.num_classes, cfg.target_seed)
    else:
        targets = np.full_like(t, -1)
    d, lv, s, rs, diag = _run(spec, params, x, t, cfg, cfg.loss, targets, lambda i: 0)
    return _outcome(spec, params, x, t, d, lv, s, rs, targets, cfg, cfg.loss, diag)


def multi_targeted_attack(spec, params, x, t, cfg):
    """One targeted run per wrong class; an example falls if any run succeeds.

    The reported target is the class of the winning run.
    """
    x, t = _batched(spec, x, t)
    c = spec.num_classes
    if c < 2:
        raise ContractError("multi-targeted attack needs at least two classes")
    n = len(x)
    deltas = np.zeros_like(x)
    losses = np.full(n, -np.inf)
    success = np.zeros(n, dtype=bool)
    restart_of = np.zeros(n, dtype=np.int64)
    best_target = np.full(n, -1)
    diagnostics = []
    for offset in range(1, c):
        todo = np.flatnonzero(~success) if cfg.early_stop else np.arange(n)
        if len(todo) == 0:
            break
        targets = (t[todo] + offset) % c
        # RNG slot = target class + 1, so slot 0 stays reserved for single-loss attacks
        d, lv, s, rs, diag = _run(
            spec, params, x[todo], t[todo], cfg, "multi_targeted", targets, lambda i, tg=targets: int(tg[i]) + 1, todo
        )
        for item in diag:
            item["example"] = int(todo[item["example"]])
        diagnostics += diag
        better = (s & ~success[todo]) | ((s == success[todo]) & (lv > losses[todo]))
        sel = todo[better]
        deltas[sel] = d[better]
        losses[sel] = lv[better]
        success[sel] = s[better]
        restart_of[sel] = rs[better]
        best_target[sel] = targets[better]
    return _outcome(spec, params, x, t, deltas, losses, success, restart_of, best_target, cfg, "multi_targeted",
                    diagnostics)


def fgsm_k(spec, params, x, t, k, epsilon, step=None, box=(0.0, 1.0), batch_size=256):
    """k signed-gradient ascent steps on cross-entropy from delta = 0 (step eps/10 by default)."""
    if k < 1:
        raise ContractError("fgsm_k needs k >= 1")
    cfg = AttackConfig(
        epsilon=epsilon, loss="cross_entropy", steps=k, optimizer="sign",
        schedule=((k, epsilon / 10.0 if step is None else step),), restarts=1, box=box, init="zero",
        batch_size=batch_size,
    )
    return pgd_attack(spec, params, x, t, cfg)


def evaluate_robustness(spec, params, x, t, cfg):
    """Run the attack described by ``cfg`` and return its outcome."""
    if cfg.loss == "multi_targeted":
        return multi_targeted_attack(spec, params, x, t, cfg)
    return pgd_attack(spec, params, x, t, cfg)


def nominal_accuracy(spec, params, x, t, batch_size=512):
    x, t = _batched(spec, x, t)
    preds = np.concatenate(
        [np.argmax(_plain_logits(spec, params, x[i : i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
    )
    return float(np.mean(preds == t)) if len(t) else math.nan
