"""Rejecting ensembles over differentiators, plus two baseline defenses.

Label 0 is the rejection class everywhere in this module.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .nn import SGD, apply_gradients, softmax_cross_entropy
from .transfer import StudentModel, batches, dataset_loss

REJECT = 0

PAIRWISE_COMPLETE = "pairwise-complete"
PER_CLASS_COMPLETE = "per-class-complete"
PARTIAL = "partial"


@dataclass
class EnsembleConfig:
    size: int = 5
    threshold: int = 1
    seed: int = 0
    resample: bool = True
    early_exit: bool = True

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("ensemble size must be >= 0")
        if self.size and not 1 <= self.threshold <= self.size:
            raise ValueError("threshold must lie in 1..size")


class DifferentiatorRegistry:
    """Differentiators keyed by their sorted class tuple."""

    def __init__(self, num_classes, differentiators=()):
        self.num_classes = int(num_classes)
        self.entries = {}
        for d in differentiators:
            self.add(d)

    def add(self, diff):
        key = tuple(sorted(int(c) for c in diff.classes))
        if any(not 1 <= c <= self.num_classes for c in key):
            raise ValueError(f"classes {key} outside 1..{self.num_classes}")
        self.entries[key] = diff

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries))

    def __getitem__(self, key):
        return self.entries[tuple(sorted(key))]

    def items(self):
        return [(k, self.entries[k]) for k in sorted(self.entries)]

    def for_class(self, c):
        return [k for k in sorted(self.entries) if c in k]

    def is_pairwise_complete(self):
        pairs = set(itertools.combinations(range(1, self.num_classes + 1), 2))
        return pairs <= set(self.entries)

    def is_per_class_complete(self):
        return all(self.for_class(c) for c in range(1, self.num_classes + 1))

    @property
    def coverage(self):
        if self.is_pairwise_complete():
            return PAIRWISE_COMPLETE
        if self.is_per_class_complete():
            return PER_CLASS_COMPLETE
        return PARTIAL


@dataclass
class Prediction:
    label: int
    phase1_label: int
    selected: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    votes: dict = field(default_factory=dict)

    @property
    def rejected(self):
        return self.label == REJECT

    def to_json(self):
        out = {
            "phase1_label": int(self.phase1_label),
            "selected_pairs": [list(map(int, k)) for k in self.selected],
            "verdicts": [int(v) for v in self.verdicts],
            "final_label": int(self.label),
            "rejected": bool(self.rejected),
        }
        if self.votes:
            out["votes"] = {str(k): int(v) for k, v in self.votes.items()}
        return out


# --------------------------------------------------------------------------- #
# Two-phase inference
# --------------------------------------------------------------------------- #


def select(candidates, k, cfg, query_id, pre_result):
    """First ``k`` of a seeded permutation, so selections are nested in ``k``.

    With ``cfg.resample`` the permutation depends on the query, otherwise it
    is fixed per predicted class.
    """
    if k > len(candidates):
        raise ValueError(f"ensemble size {k} exceeds {len(candidates)} available differentiators")
    key = [cfg.seed, 1, int(query_id)] if cfg.resample else [cfg.seed, 2, int(pre_result)]
    order = np.random.default_rng(key).permutation(len(candidates))
    return [candidates[i] for i in order[:k]]


def two_phase_decide(pre_result, selected, verdict_of, threshold, early_exit=True):
    """Reject iff at least ``threshold`` selected differentiators disagree with ``pre_result``."""
    verdicts, disagree = [], 0
    for key in selected:
        v = int(verdict_of(key))
        verdicts.append(v)
        if v != pre_result:
            disagree += 1
            if early_exit and disagree >= threshold:
                break
    rejected = bool(selected) and disagree >= threshold
    return (REJECT if rejected else pre_result), verdicts


def two_phase_infer(x, student, registry, cfg=None, query_id=0):
    """Student prediction, validated by ``cfg.size`` differentiators covering it."""
    cfg = cfg or EnsembleConfig()
    pre = int(student.predict(x))
    return _two_phase(pre, lambda key: registry[key].predict(x), registry, cfg, query_id)


def _two_phase(pre, verdict_of, registry, cfg, query_id):
    if cfg.size == 0:
        return Prediction(pre, pre)
    candidates = registry.for_class(pre)
    if not candidates:
        raise KeyError(f"no differentiators cover class {pre}")
    selected = select(candidates, cfg.size, cfg, query_id, pre)
    label, verdicts = two_phase_decide(pre, selected, verdict_of, cfg.threshold, cfg.early_exit)
    return Prediction(label, pre, selected, verdicts)


class VerdictTable:
    """Precomputed student and differentiator predictions over a batch of inputs."""

    def __init__(self, student, registry, images):
        self.registry = registry
        self.student = np.asarray(student.predict(images))
        self.diff = {key: np.asarray(d.predict(images)) for key, d in registry.items()}

    def __len__(self):
        return len(self.student)

    def two_phase(self, cfg, query_ids=None):
        ids = np.arange(len(self)) if query_ids is None else query_ids
        out = []
        for i, qid in enumerate(ids):
            pre = int(self.student[i])
            out.append(_two_phase(pre, lambda key, i=i: self.diff[key][i], self.registry, cfg, qid))
        return out

    def voting(self):
        return [vote({k: v[i] for k, v in self.diff.items()}, self.registry.num_classes)
                for i in range(len(self))]


# --------------------------------------------------------------------------- #
# Voting
# --------------------------------------------------------------------------- #


def vote(verdicts, num_classes):
    """Accept the top class only if it collects the maximal ``K - 1`` votes."""
    votes = np.zeros(num_classes + 1, dtype=int)
    for v in verdicts.values():
        votes[int(v)] += 1
    top = int(np.argmax(votes[1:])) + 1
    label = top if votes[top] == num_classes - 1 else REJECT
    return Prediction(label, top, sorted(verdicts), [int(verdicts[k]) for k in sorted(verdicts)],
                      {c: int(votes[c]) for c in range(1, num_classes + 1)})


def voting_infer(x, registry, num_classes=None):
    num_classes = num_classes or registry.num_classes
    if num_classes != registry.num_classes or not registry.is_pairwise_complete():
        raise ValueError("voting needs a pairwise-complete registry")
    pairs = list(itertools.combinations(range(1, num_classes + 1), 2))
    return vote({p: int(registry[p].predict(x)) for p in pairs}, num_classes)


# --------------------------------------------------------------------------- #
# Baselines
# --------------------------------------------------------------------------- #


def drop_pixels(x, drop_rate, seed):
    """Zero ``floor(drop_rate * size)`` uniformly chosen entries of each image."""
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must lie in [0, 1)")
    x = np.array(x, dtype=np.float32, copy=True)
    single = x.ndim == 3
    xb = x[None] if single else x
    flat = xb.reshape(len(xb), -1)
    n_drop = int(np.floor(drop_rate * flat.shape[1]))
    if n_drop:
        rng = np.random.default_rng(seed)
        for row in flat:
            row[rng.choice(flat.shape[1], n_drop, replace=False)] = 0
    return xb[0] if single else xb


def dropout_input_defense(x, student, drop_rate, seed=0):
    """Student label on an input with a random fraction of pixels zeroed."""
    xd = drop_pixels(x, drop_rate, seed)
    pred = student.predict(xd)
    if np.ndim(pred) == 0:
        return Prediction(int(pred), int(pred))
    return [Prediction(int(p), int(p)) for p in pred]


def mean_pairwise_distance(h):
    """Mean over in-batch pairs of the per-element squared distance, and its gradient."""
    n = len(h)
    flat = h.reshape(n, -1).astype(np.float64)
    f = flat.shape[1]
    pairs = n * (n - 1) / 2
    total = flat.sum(axis=0)
    value = (n * np.sum(flat * flat) - np.sum(total * total)) / (pairs * f)
    grad = 2 * (n * flat - total[None, :]) / (pairs * f)
    return float(value), grad.reshape(h.shape).astype(h.dtype)


def neuron_distance_retrain(student, images, labels, margin=None, epochs=10, beta=0.1, cutoff=None,
                            batch_size=32, optimizer=None, seed=0):
    """Retrain every layer with cross-entropy plus a hinge pushing apart cut-off features.

    Loss = CE + beta * max(0, 1 - D / margin)^2, with D the mean per-element
    squared distance between in-batch pairs of cut-off features.  ``cutoff``
    defaults to the last frozen layer of the incoming student and ``margin``
    to twice that layer's distance on ``images`` before retraining, which
    keeps the hinge active whatever the feature scale.
    """
    net = student.network.copy()
    if cutoff is None:
        frozen = [i for i, f in enumerate(net.frozen) if f]
        if not frozen:
            raise ValueError("student has no frozen layers; pass cutoff explicitly")
        cutoff = frozen[-1]
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=int)
    if margin is None:
        margin = 2 * cutoff_distance(net, images, cutoff)
    if margin <= 0:
        raise ValueError("margin must be positive")
    net.frozen = [False] * len(net)
    optimizer = optimizer or SGD(0.01, 0.9)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        for idx in batches(len(labels), batch_size, rng):
            xb, yb = images[idx], labels[idx]
            tr = net.trace(xb)
            _, grad = softmax_cross_entropy(tr.outputs[-1], yb)
            grads = {}
            # backprop down to the cut-off, where the hinge gradient joins
            for i in range(len(net) - 1, -1, -1):
                layer = net.layers[i]
                if i == cutoff and beta and len(idx) > 1:
                    dist, dgrad = mean_pairwise_distance(tr.outputs[i])
                    gap = 1 - dist / margin
                    if gap > 0:
                        grad = grad - beta * 2 * gap / margin * dgrad
                grad, g = layer.backward(grad, tr.caches[i], param_grads=layer.has_params)
                if layer.has_params:
                    grads[i] = g
            apply_gradients(net, grads, optimizer)
        history.append(dataset_loss(net, images, labels))
    return StudentModel(net, student.teacher_id, student.policy, list(student.label_space), history)


def cutoff_distance(net, images, layer):
    return mean_pairwise_distance(net.forward_to_layer(images, layer))[0]


__all__ = [
    "REJECT", "EnsembleConfig", "DifferentiatorRegistry", "Prediction", "VerdictTable",
    "two_phase_infer", "two_phase_decide", "voting_infer", "vote", "select",
    "dropout_input_defense", "drop_pixels", "neuron_distance_retrain", "mean_pairwise_distance",
    "cutoff_distance",
]
