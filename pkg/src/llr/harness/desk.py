"""Desk-scale experiment drivers: a two-class image subset and a small CNN.

The full 110-epoch schedule is compressed to 30 epochs (decays at 25 and 28,
radius ramp over 5).  ``adv-k`` is adversarial training with k inner steps;
``llr-k`` is the regularized objective with k inner steps.
"""

import dataclasses

import numpy as np

from llr import attacks, linearity, models, training
from llr.harness.sweep import strength_sweep

EPSILON = 8 / 255
CLASSES = (0, 1)
TRAIN_SIZE = 5000
TEST_SIZE = 500
EVAL_RESTARTS = 20


def base_config(epochs=30, seed=0):
    scale = epochs / 30
    return training.TrainConfig(
        epochs=epochs, batch_size=256, lr=0.1,
        lr_decays=((round(25 * scale), 0.1), (round(28 * scale), 0.1)),
        ramp_epochs=max(1, round(5 * scale)) if epochs else 0, epsilon=EPSILON, seed=seed,
    )


def adv_config(steps, **kw):
    return dataclasses.replace(base_config(**kw), mode="adv", pgd_steps=steps)


def llr_config(steps, **kw):
    return dataclasses.replace(base_config(**kw), mode="llr", inner_steps=steps)


def desk_model(num_classes=2):
    return models.small_cnn(num_classes)


def fit(cfg, train_set, spec=None):
    spec = spec or desk_model(train_set.num_classes)
    return spec, training.train(spec, train_set, cfg).params


def median_gamma(spec, params, images, labels, epsilon=EPSILON, steps=50, seed=0):
    y = models.one_hot(labels, spec.num_classes)
    gamma, _ = linearity.local_linearity(linearity.model_loss_fn(spec, params, y), images, epsilon, steps=steps,
                                         seed=seed)
    return float(np.median(gamma))


def inner_step_gamma(train_set, epochs=30, probe=256, seed=0):
    """Median end-of-training gamma on a training batch for adv-1 and adv-8."""
    out = {}
    for steps in (1, 8):
        spec, params = fit(adv_config(steps, epochs=epochs, seed=seed), train_set)
        out[f"adv-{steps}"] = median_gamma(spec, params, train_set.images[:probe], train_set.labels[:probe], seed=seed)
    out["ratio"] = out["adv-1"] / out["adv-8"]
    return out


def obfuscation_gaps(train_set, test_set, epochs=30, seed=0, restarts=EVAL_RESTARTS):
    """Multi-targeted vs FGSM-20 accuracy for adv-1 and llr-2, and test gamma for adv-2 vs llr-2."""
    res = {}
    models_ = {}
    for name, cfg in (("adv-1", adv_config(1, epochs=epochs, seed=seed)),
                      ("adv-2", adv_config(2, epochs=epochs, seed=seed)),
                      ("llr-2", llr_config(2, epochs=epochs, seed=seed))):
        models_[name] = fit(cfg, train_set)
    x, t = test_set.images, test_set.labels
    for name in ("adv-1", "llr-2"):
        spec, params = models_[name]
        mcfg = attacks.AttackConfig(EPSILON, "multi_targeted", restarts=restarts, seed=seed)
        mt = attacks.multi_targeted_attack(spec, params, x, t, mcfg)
        fg = attacks.fgsm_k(spec, params, x, t, 20, EPSILON)
        res[name] = {"multi_targeted": mt.adversarial_accuracy, "fgsm20": fg.adversarial_accuracy,
                     "gap_points": 100 * (fg.adversarial_accuracy - mt.adversarial_accuracy),
                     "nominal": attacks.nominal_accuracy(spec, params, x, t)}
    for name in ("adv-2", "llr-2"):
        spec, params = models_[name]
        res.setdefault(name, {})["median_test_gamma"] = median_gamma(spec, params, x, t, seed=seed)
    return res, models_


def sweep_configs(seed=0):
    return [attacks.AttackConfig(EPSILON, "untargeted", steps=s, restarts=r, seed=seed)
            for s, r in ((10, 1), (50, 1), (200, 1), (200, 4))]


def sweep_drops(models_, test_set, names=("adv-2", "llr-2"), seed=0):
    """Accuracy drop from the weakest to the strongest sweep config, per model."""
    out = {}
    for name in names:
        spec, params = models_[name]
        rep = strength_sweep(spec, params, test_set.images, test_set.labels, sweep_configs(seed))
        out[name] = {"accuracies": rep.accuracies, "drop": rep.drop}
    return out
