"""Self-training for unsupervised adaptation: each round re-solves the robust
learning problem, then merges class-balanced confident target predictions
into the source set under a growing portion schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .calibration import brier, ece
from .data import TARGET, Dataset, Sample
from .errors import ConfigError, ContractError
from .robust import default_classifier, target_predictions, train_end_to_end
from .domain import default_domain_classifier


@dataclass
class SelfTrainSchedule:
    p0: float = 0.065
    dp: float = 0.0085
    pmax: float = 0.165
    rounds: int = 5

    def __post_init__(self):
        if not 0.0 <= self.p0 <= self.pmax <= 1.0:
            raise ConfigError("need 0 <= p0 <= pmax <= 1")
        if self.dp < 0:
            raise ConfigError("dp must be >= 0")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")

    def portion(self, t):
        return min(self.p0 + t * self.dp, self.pmax)


@dataclass(frozen=True)
class PseudoLabel:
    target_index: int
    label: int
    confidence: float


def select_pseudo(preds, portion):
    """Class-balanced selection of the most confident predictions.

    For every class c, the ceil(portion * N_c) highest-confidence targets
    whose argmax is c are selected (N_c = number of targets predicted as c),
    ties broken by lower target index. Each target appears at most once.
    """
    if not 0.0 <= portion <= 1.0:
        raise ContractError("portion must lie in [0, 1]")
    P = np.asarray([getattr(p, "probs", p) for p in preds], dtype=float)
    if P.shape[0] == 0 or portion == 0.0:
        return []
    labels = P.argmax(axis=1)
    conf = P.max(axis=1)
    chosen = []
    for c in range(P.shape[1]):
        idxs = np.flatnonzero(labels == c)
        if idxs.size == 0:
            continue
        quota = min(math.ceil(portion * idxs.size), idxs.size)
        order = sorted(idxs.tolist(), key=lambda i: (-conf[i], i))
        for i in order[:quota]:
            chosen.append(PseudoLabel(int(i), int(c), float(conf[i])))
    chosen.sort(key=lambda pl: pl.target_index)
    return chosen


def _augmented_source(source, target, pseudo):
    extra = [
        Sample(target.samples[pl.target_index].features, pl.label, TARGET) for pl in pseudo
    ]
    return Dataset(list(source.samples) + extra, source.class_count, name=source.name)


def run_drst(source, target, schedule, cfg, r=0.5, clf=None, dom=None, unit_ratio=False):
    """Iterated robust self-training.

    One end-to-end training pass runs first; each round t then selects a
    portion(t) of confident targets per class (test-mode predictions),
    rebuilds the augmented source as original source plus freshly selected
    pseudo-labeled targets (earlier selections are discarded, not
    accumulated), and retrains from the current models. Pseudo-labeled
    targets keep their target domain tag, so the domain classifier keeps
    seeing them as target inputs. History rows carry round, portion,
    n_pseudo, and, when the target carries evaluation labels, accuracy /
    Brier / ECE on all targets.
    """
    if len(target) == 0:
        raise ContractError("target dataset must be non-empty")
    if clf is None:
        clf = default_classifier(source.dim, source.class_count, seed=cfg.seed, r=r)
    if dom is None:
        dom = default_domain_classifier(source.dim, seed=cfg.seed + 1)

    clf, dom, _ = train_end_to_end(source, target, clf, dom, cfg, unit_ratio=unit_ratio)
    history = []
    for t in range(schedule.rounds):
        portion = schedule.portion(t)
        probs, _ = target_predictions(clf, dom, target, unit_ratio=unit_ratio)
        pseudo = select_pseudo(probs, portion)
        aug = _augmented_source(source, target, pseudo)
        round_cfg = replace(cfg, seed=cfg.seed + t + 1)
        clf, dom, _ = train_end_to_end(aug, target, clf, dom, round_cfg, unit_ratio=unit_ratio)

        record = {"round": t, "portion": portion, "n_pseudo": len(pseudo)}
        if target.labeled:
            probs_eval, _ = target_predictions(clf, dom, target, unit_ratio=unit_ratio)
            e, _ = ece(probs_eval, target.y)
            record.update(
                accuracy=float((probs_eval.argmax(axis=1) == target.y).mean()),
                brier=brier(probs_eval, target.y),
                ece=e,
            )
        history.append(record)
    return clf, dom, history
