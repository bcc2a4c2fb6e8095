"""Training loops: plain ERM, adversarial training and the linearity-regularized objective.

The regularized objective for a batch B with shared perturbation d is

    w * L_B + mean_j [ lam * g(d; x_j) + mu * |d . grad_x l(x_j)| ]

where d comes from a few projected Adam steps that *increase* the batch-mean
gap, starting from a uniform draw in the current eps-cube.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from llr import autodiff as ad
from llr import linearity, models
from llr.attacks import project_linf
from llr.errors import ConfigError, NumericalError
from llr.harness.config import parse_epsilon, reject_unknown

MODES = ("erm", "adv", "llr")


@dataclass
class TrainConfig:
    mode: str = "llr"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.1
    lr_decays: tuple = ((25, 0.1), (28, 0.1))
    momentum: float = 0.9
    weight_decay: float = 2e-4
    epsilon: float = 8 / 255
    ramp_epochs: float = 5
    # adversarial training
    pgd_steps: int = 1
    # regularizer
    inner_steps: int = 10
    lam: float = 4.0
    mu: float = 3.0
    nominal_weight: float = 2.0
    per_example_delta: bool = False
    # shared by both inner maximizations
    inner_step_size: float = 0.1
    inner_optimizer: str = "adam"
    delta_init: str = None  # "uniform" | "zero"; None picks uniform for llr, zero for adv
    box: tuple = (0.0, 1.0)
    seed: int = 0
    gamma_probe: int = 0
    gamma_steps: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.epsilon = parse_epsilon(self.epsilon)
        self.lr_decays = tuple((float(e), float(f)) for e, f in self.lr_decays)
        self.box = None if self.box is None else tuple(float(b) for b in self.box)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be non-negative")
        if not self.nominal_weight > 0:
            raise ConfigError("nominal_weight must be positive")
        if self.ramp_epochs > self.epochs:
            raise ConfigError(f"ramp_epochs ({self.ramp_epochs}) exceeds epochs ({self.epochs})")
        if self.epochs < 0 or self.batch_size < 1 or self.pgd_steps < 0 or self.inner_steps < 0:
            raise ConfigError("epochs, batch_size, pgd_steps and inner_steps must be non-negative (batch_size >= 1)")
        if self.inner_optimizer not in ("adam", "sign"):
            raise ConfigError(f"inner_optimizer must be 'adam' or 'sign', got {self.inner_optimizer!r}")
        if self.delta_init not in (None, "uniform", "zero"):
            raise ConfigError(f"delta_init must be 'uniform' or 'zero', got {self.delta_init!r}")

    @property
    def init(self):
        if self.delta_init is not None:
            return self.delta_init
        return "uniform" if self.mode == "llr" else "zero"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lr_decays"] = [list(p) for p in self.lr_decays]
        d["box"] = None if self.box is None else list(self.box)
        return d

    @classmethod
    def from_dict(cls, d):
        reject_unknown(d, {f.name for f in dataclasses.fields(cls)}, "train")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def ablation_mode(cfg):
    """The same configuration with the gradient-alignment term switched off."""
    if cfg.mode != "llr":
        raise ConfigError("ablation applies to llr configs only")
    return dataclasses.replace(cfg, mu=0.0)


def epsilon_at(epoch, cfg):
    """Linear ramp from 0 to the target radius over ``ramp_epochs`` (fractional epochs allowed)."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    if cfg.ramp_epochs <= 0 or epoch >= cfg.ramp_epochs:
        return cfg.epsilon
    return cfg.epsilon * epoch / cfg.ramp_epochs


def lr_at(epoch, cfg):
    lr = cfg.lr
    for at, factor in cfg.lr_decays:
        if epoch >= at:
            lr *= factor
    return lr


@dataclass
class TrainState:
    params: models.ParamSet
    velocity: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params):
        return cls(params, {k: np.zeros_like(v) for k, v in params.tensors.items()})


@dataclass
class StepRecord:
    """Loss bookkeeping for one optimizer step (values before the update)."""

    total: float
    nominal: float
    gap_mean: float = 0.0
    dot_mean: float = 0.0
    epsilon: float = 0.0
    lr: float = 0.0
    correct: int = 0
    delta: np.ndarray = None
    gaps: np.ndarray = None


def _mean(node):
    return ad.sum_(node) * (1.0 / node.shape[0])


def _sgd_update(state, grads, lr, cfg):
    """Momentum SGD; L2 decay is added to weight gradients only, never to biases."""
    for name in sorted(state.params.tensors):
        g = grads[name]
        if name.endswith(".weight") and cfg.weight_decay:
            g = g + cfg.weight_decay * state.params.tensors[name]
        v = cfg.momentum * state.velocity[name] + g
        state.velocity[name] = v
        state.params.tensors[name] = state.params.tensors[name] - lr * v
    state.step += 1


def _check_finite(record, grads, state):
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if not np.isfinite(record.total) or bad:
        raise NumericalError(
            "non-finite loss or gradient; step aborted",
            {"epoch": state.epoch, "step": state.step, "total": record.total, "nominal": record.nominal,
             "bad_gradients": bad},
        )


def _batch_rng(cfg, state):
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, state.epoch, state.step, 1)))


def _init_delta(shape, eps, cfg, rng):
    if cfg.init == "zero" or eps == 0:
        return np.zeros(shape)
    return rng.uniform(-eps, eps, size=shape)


def _apply(state, total, theta, cfg, lr, record):
    names = sorted(theta)
    grads = dict(zip(names, ad.grad(total, [theta[n] for n in names])))
    _check_finite(record, grads, state)
    _sgd_update(state, grads, lr, cfg)
    return record


def erm_step(state, spec, x, t, cfg, lr, eps=0.0):
    theta = state.params.leaves()
    y = models.one_hot(t, spec.num_classes)
    z = models.logits(spec, theta, x)
    total = _mean(models.cross_entropy(z, y))
    correct = int(np.sum(np.argmax(z.value, axis=1) == t))
    rec = StepRecord(float(total.value), float(total.value), epsilon=eps, lr=lr, correct=correct)
    return _apply(state, total, theta, cfg, lr, rec)


def adversarial_examples(spec, params, x, t, eps, steps, cfg, rng):
    """Final iterate of ``steps`` projected ascent steps on cross-entropy."""
    y = models.one_hot(t, spec.num_classes)
    delta = project_linf(_init_delta(x.shape, eps, cfg, rng), eps, x, cfg.box)
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    b1, b2 = 0.9, 0.999
    for k in range(steps):
        xa = ad.leaf(x + delta)
        g = ad.grad(ad.sum_(models.loss(spec, params, xa, y)), xa)
        if cfg.inner_optimizer == "sign":
            upd = np.sign(g)
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            upd = (m / (1 - b1 ** (k + 1))) / (np.sqrt(v / (1 - b2 ** (k + 1))) + 1e-8)
        delta = project_linf(delta + cfg.inner_step_size * upd, eps, x, cfg.box)
    return delta


def adv_train_step(state, spec, x, t, cfg, lr, eps):
    rng = _batch_rng(cfg, state)
    delta = adversarial_examples(spec, state.params, x, t, eps, cfg.pgd_steps, cfg, rng)
    theta = state.params.leaves()
    y = models.one_hot(t, spec.num_classes)
    z = models.logits(spec, theta, x + delta)
    total = _mean(models.cross_entropy(z, y))
    correct = int(np.sum(np.argmax(z.value, axis=1) == t))
    rec = StepRecord(float(total.value), float(total.value), epsilon=eps, lr=lr, correct=correct, delta=delta)
    return _apply(state, total, theta, cfg, lr, rec)


def llr_objective(spec, theta, x, y, delta, cfg):
    """Recorded objective pieces: (total, nominal, gaps, dots).

    ``dots`` is None when mu is zero; in that case the graph holds no
    |d . grad| term at all.  With lam = mu = 0 the regularizer is not built.
    """
    fn = lambda xn: models.loss(spec, theta, xn, y)  # noqa: E731
    if cfg.lam == 0 and cfg.mu == 0:
        nominal = _mean(fn(ad.leaf(x)))
        return nominal * cfg.nominal_weight, nominal, None, None
    gaps, dots, lx, _ = linearity.gap_terms(fn, ad.leaf(x), delta)
    nominal = _mean(lx)
    total = nominal * cfg.nominal_weight
    if cfg.lam:
        total = total + _mean(gaps) * cfg.lam
    if cfg.mu:
        align = ad.abs_(dots)
        align.name = "grad_alignment"
        total = total + _mean(align) * cfg.mu
    else:
        dots = None
    return total, nominal, gaps, dots


def llr_train_step(state, spec, x, t, cfg, lr, eps):
    y = models.one_hot(t, spec.num_classes)
    rng = _batch_rng(cfg, state)
    if cfg.lam == 0 and cfg.mu == 0:
        delta = np.zeros(x.shape[1:])
    else:
        fn = linearity.model_loss_fn(spec, state.params, y)
        if cfg.per_example_delta:
            d0 = _init_delta(x.shape, eps, cfg, rng)
            _, delta = linearity.maximize_gap(fn, x, eps, d0, cfg.inner_steps, cfg.inner_step_size,
                                              cfg.inner_optimizer)
        else:
            d0 = _init_delta(x.shape[1:], eps, cfg, rng)
            _, delta = linearity.maximize_gap(fn, x, eps, d0, cfg.inner_steps, cfg.inner_step_size,
                                              cfg.inner_optimizer, shared=True)
    theta = state.params.leaves()
    total, nominal, gaps, dots = llr_objective(spec, theta, x, y, delta, cfg)
    correct = int(np.sum(models.predict(spec, state.params, x) == t))
    rec = StepRecord(
        float(total.value), float(nominal.value),
        gap_mean=float(np.mean(gaps.value)) if gaps is not None else 0.0,
        dot_mean=float(np.mean(np.abs(dots.value))) if dots is not None else 0.0,
        epsilon=eps, lr=lr, correct=correct, delta=np.asarray(delta),
        gaps=None if gaps is None else np.array(gaps.value),
    )
    return _apply(state, total, theta, cfg, lr, rec)


def train_step(state, spec, x, t, cfg, lr, eps):
    if cfg.mode == "erm":
        return erm_step(state, spec, x, t, cfg, lr, eps)
    if cfg.mode == "adv":
        return adv_train_step(state, spec, x, t, cfg, lr, eps)
    return llr_train_step(state, spec, x, t, cfg, lr, eps)


def probe_gamma(spec, params, dataset, cfg):
    """gamma at the target radius on the first ``gamma_probe`` training examples."""
    n = min(cfg.gamma_probe, len(dataset))
    x = dataset.images[:n]
    y = models.one_hot(dataset.labels[:n], spec.num_classes)
    gamma, _ = linearity.local_linearity(linearity.model_loss_fn(spec, params, y), x, cfg.epsilon,
                                         steps=cfg.gamma_steps, seed=cfg.seed)
    return gamma


def _fmt(v):
    return float(v) if np.isfinite(v) else None


def train(spec, dataset, cfg, params=None, run_dir=None, on_step=None):
    """Run ``cfg.epochs`` epochs and return the final TrainState.

    One JSON metrics line per epoch goes to ``run_dir/metrics.jsonl``;
    checkpoints are written every ``checkpoint_every`` epochs plus a final one.
    ``on_step(state_before_params, x, t, record)`` sees every step.
    """
    from llr.harness.checkpoint import save_checkpoint

    params = models.init_params(spec, cfg.seed) if params is None else params.copy()
    params.validate(spec)
    state = TrainState.fresh(params)
    n = len(dataset)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), "w") if run_dir else None
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, 0))).permutation(n)
            lr = lr_at(epoch, cfg)
            records = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x, t = dataset.images[idx], dataset.labels[idx]
                eps = epsilon_at(epoch + b / steps_per_epoch, cfg) if cfg.mode != "erm" else 0.0
                before = state.params.copy() if on_step else None
                rec = train_step(state, spec, x, t, cfg, lr, eps)
                records.append((rec, len(idx)))
                if on_step:
                    on_step(before, x, t, rec)
            line = _epoch_metrics(epoch, records, cfg, lr)
            state.params.epoch = epoch + 1
            if cfg.gamma_probe:
                gamma = probe_gamma(spec, state.params, dataset, cfg)
                line.update(gamma_median=float(np.median(gamma)), gamma_mean=float(np.mean(gamma)),
                            gamma_max=float(np.max(gamma)))
            state.history.append(line)
            if metrics_fh:
                metrics_fh.write(json.dumps(line, sort_keys=True) + "\n")
                metrics_fh.flush()
            if run_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(run_dir, f"epoch{epoch + 1:03d}.ckpt"), spec, state.params, cfg.digest())
        state.epoch = cfg.epochs
        state.params.seed = cfg.seed
        state.params.meta = {"mode": cfg.mode, "config_digest": cfg.digest()}
        if run_dir:
            save_checkpoint(os.path.join(run_dir, "final.ckpt"), spec, state.params, cfg.digest())
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state


def _epoch_metrics(epoch, records, cfg, lr):
    count = sum(k for _, k in records)
    wavg = lambda attr: sum(getattr(r, attr) * k for r, k in records) / count  # noqa: E731
    line = {
        "epoch": epoch + 1,
        "mode": cfg.mode,
        "lr": lr,
        "epsilon": records[-1][0].epsilon,
        "total_loss": _fmt(wavg("total")),
        "nominal_loss": _fmt(wavg("nominal")),
        "train_accuracy": sum(r.correct for r, _ in records) / count,
    }
    if cfg.mode == "llr":
        line["gap_mean"] = _fmt(wavg("gap_mean"))
        line["grad_dot_mean"] = _fmt(wavg("dot_mean"))
        line["batch_gap_final"] = records[-1][0].gap_mean
    return line
