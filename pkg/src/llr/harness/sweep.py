"""Adversarial accuracy under a list of increasingly strong attacks."""

import csv
import json
from dataclasses import dataclass

from llr.attacks import evaluate_robustness
from llr.errors import ContractError


@dataclass
class SweepReport:
    configs: list
    accuracies: list

    @property
    def drop(self):
        """Accuracy lost between the first (weakest) and last (strongest) config."""
        return self.accuracies[0] - self.accuracies[-1]

    def rows(self):
        for i, (cfg, acc) in enumerate(zip(self.configs, self.accuracies)):
            yield {"index": i, "loss": cfg.loss, "steps": cfg.steps, "restarts": cfg.restarts,
                   "strength": cfg.steps * cfg.restarts, "epsilon": cfg.epsilon, "adversarial_accuracy": acc}

    def to_csv(self, path):
        rows = list(self.rows())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"points": list(self.rows()), "drop": self.drop}, fh, indent=2, sort_keys=True)


def strength_sweep(spec, params, x, t, sweep):
    if not sweep:
        raise ContractError("strength_sweep needs at least one attack config")
    accs = [evaluate_robustness(spec, params, x, t, cfg).adversarial_accuracy for cfg in sweep]
    return SweepReport(list(sweep), accs)
