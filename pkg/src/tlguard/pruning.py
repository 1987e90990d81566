"""Activation profiles, ratio-based pruning and differentiator construction.

Conv layers are pruned a whole filter at a time, dense layers one connection
at a time.  Scores come from class-restricted activations of the Teacher:

* conv filter: mean over samples and positions of ``|output|``;
* dense connection ``(o, i)``: ``|w_oi| * mean over samples of |input_i|``.

Profiles are plain means, so per-class profiles can be cached once and merged
for any class subset.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2D, Dense
from .transfer import FreezePolicy, accuracy, fit, make_student


@dataclass
class ActivationProfile:
    """Per prunable layer unit scores over the samples of ``classes``."""

    scores: dict
    classes: tuple
    count: int

    def vector(self):
        return np.concatenate([self.scores[i].ravel() for i in sorted(self.scores)])

    @staticmethod
    def merge(profiles):
        """Sample-weighted mean of profiles over disjoint class sets."""
        profiles = list(profiles)
        total = sum(p.count for p in profiles)
        scores = {}
        for i in profiles[0].scores:
            scores[i] = sum(p.scores[i] * (p.count / total) for p in profiles)
        classes = tuple(sorted(c for p in profiles for c in p.classes))
        return ActivationProfile(scores, classes, total)


def profile_activations(net, images, classes=(), layers=None, batch_size=256):
    """Activation scores of ``net`` over ``images``.

    ``layers`` restricts which prunable layers are profiled (all by default).
    """
    images = np.asarray(images, dtype=net.dtype)
    if len(images) == 0:
        raise ValueError("cannot profile an empty dataset")
    wanted = set(net.prunable_layers() if layers is None else layers)
    sums = {}
    for b in range(0, len(images), batch_size):
        h = images[b:b + batch_size]
        for i, layer in enumerate(net.layers):
            if i in wanted:
                if isinstance(layer, Conv2D):
                    y, _ = layer.forward(h)
                    s = np.abs(y).mean(axis=(2, 3)).sum(axis=0, dtype=np.float64)
                    sums[i] = sums.get(i, 0) + s
                    h = y
                    continue
                if isinstance(layer, Dense):
                    sums[i] = sums.get(i, 0) + np.abs(h).sum(axis=0, dtype=np.float64)
            h, _ = layer.forward(h)
    n = len(images)
    scores = {}
    for i, s in sums.items():
        layer = net.layers[i]
        mean = s / n
        if isinstance(layer, Dense):
            scores[i] = np.abs(layer.effective_weight().astype(np.float64)) * mean[None, :]
        else:
            scores[i] = mean
    return ActivationProfile(scores, tuple(sorted(classes)), n)


def unit_count(layer):
    return layer.weight.shape[0] if isinstance(layer, Conv2D) else layer.weight.size


def already_masked(layer):
    """Boolean per unit: filter fully masked (conv) or connection masked (dense)."""
    n = unit_count(layer)
    if layer.mask is None:
        return np.zeros(n, dtype=bool)
    if isinstance(layer, Conv2D):
        return ~layer.mask.reshape(n, -1).any(axis=1)
    return layer.mask.ravel() == 0


def prune_layer(layer, scores, ratio):
    """Mask of the layer's weight shape removing the ``floor(ratio * n)`` lowest units.

    Ties go to the lowest unit index.  Units the layer already masks are
    ranked first so they stay pruned.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = unit_count(layer)
    if scores.size != n:
        raise ValueError(f"expected {n} scores, got {scores.size}")
    count = max(int(np.floor(ratio * n)), int(already_masked(layer).sum()))
    ranked = np.where(already_masked(layer), -np.inf, scores)
    drop = np.argsort(ranked, kind="stable")[:count]
    keep = np.ones(n, dtype=layer.weight.dtype)
    keep[drop] = 0
    if isinstance(layer, Conv2D):
        return np.broadcast_to(keep[:, None, None, None], layer.weight.shape).copy()
    return keep.reshape(layer.weight.shape)


@dataclass
class PruningPlan:
    """One ratio per prunable layer, in layer order."""

    ratios: list

    def __post_init__(self):
        self.ratios = [float(r) for r in self.ratios]
        if any(not 0 <= r < 1 for r in self.ratios):
            raise ValueError("pruning ratios must lie in [0, 1)")

    @classmethod
    def linear(cls, n_prunable, max_ratio=0.6):
        """0 at the first prunable layer rising linearly to ``max_ratio`` at the last."""
        if n_prunable == 1:
            return cls([max_ratio])
        return cls(list(np.linspace(0.0, max_ratio, n_prunable)))

    @classmethod
    def zeros(cls, n_prunable):
        return cls([0.0] * n_prunable)

    def for_network(self, net):
        layers = net.prunable_layers()
        if len(layers) != len(self.ratios):
            raise ValueError(f"plan has {len(self.ratios)} ratios for {len(layers)} prunable layers")
        return dict(zip(layers, self.ratios))

    def perturbed(self, delta, rng):
        """Each nonzero ratio moved by +-delta, clipped into [0, 0.95]."""
        out = []
        for r in self.ratios:
            if r == 0:
                out.append(0.0)
            else:
                out.append(float(np.clip(r + rng.choice([-delta, delta]), 0.0, 0.95)))
        return PruningPlan(out)


def prune_network(net, profile, plan, layers=None, workers=1):
    """Set masks on ``net`` in place, each layer independently of the others."""
    ratios = plan.for_network(net)
    targets = [i for i in ratios if layers is None or i in layers]

    def one(i):
        return i, prune_layer(net.layers[i], profile.scores[i], ratios[i])

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            masks = list(ex.map(one, targets))
    else:
        masks = [one(i) for i in targets]
    for i, m in masks:
        net.layers[i].set_mask(m)
    return net


# --------------------------------------------------------------------------- #
# Differentiators
# --------------------------------------------------------------------------- #


@dataclass
class Differentiator:
    """A pruned student over a small label set, reporting original labels."""

    network: object
    classes: tuple
    plan: PruningPlan
    policy: FreezePolicy
    history: list = field(default_factory=list)

    @property
    def output_labels(self):
        return np.asarray(self.classes)

    def predict(self, x):
        raw = self.network.predict(x)
        if np.ndim(raw) == 0:
            return int(self.classes[raw - 1])
        return self.output_labels[raw - 1]

    def masks(self):
        return {i: l.mask for i, l in enumerate(self.network.layers) if l.has_params and l.mask is not None}


class ProfileCache:
    """Per-class Teacher profiles, computed once and merged on demand."""

    def __init__(self, teacher, images, labels):
        self.teacher = teacher
        self.images = np.asarray(images)
        self.labels = np.asarray(labels)
        self._per_class = {}

    def per_class(self, c):
        if c not in self._per_class:
            idx = np.flatnonzero(self.labels == c)
            if len(idx) == 0:
                raise ValueError(f"no samples of class {c}")
            self._per_class[c] = profile_activations(self.teacher, self.images[idx], (c,))
        return self._per_class[c]

    def for_classes(self, classes):
        return ActivationProfile.merge(self.per_class(c) for c in classes)


@dataclass
class TrainSettings:
    epochs: int = 10
    epochs_per_iteration: int = 4
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9


def _check_classes(classes, labels):
    classes = tuple(int(c) for c in classes)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if len(set(classes)) != len(classes):
        raise ValueError("class subsets overlap")
    for c in classes:
        if not np.any(labels == c):
            raise ValueError(f"class {c} has no samples")
    return tuple(sorted(classes))


def build_differentiator(teacher, images, labels, classes, plan, policy=None, iteration_times=5,
                         settings=None, seed=0, cache=None, eval_data=None, snapshots=False):
    """Prune the Teacher by class activation, transfer-learn, then prune/retrain.

    ``images``/``labels`` are training data in the original label space; only
    samples of ``classes`` are used.  With ``eval_data=(x, y)`` the held-out
    accuracy after each iteration is recorded in ``history``.  With
    ``snapshots`` a copy of the differentiator after every iteration is kept
    in ``history`` entries under ``"model"``.
    """
    from .nn import SGD

    labels = np.asarray(labels)
    classes = _check_classes(classes, labels)
    if iteration_times < 1:
        raise ValueError("iteration_times must be >= 1")
    policy = policy or FreezePolicy.deep()
    settings = settings or TrainSettings()
    sel = np.isin(labels, classes)
    x = np.asarray(images)[sel]
    remap = {c: i + 1 for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels[sel]])

    cache = cache or ProfileCache(teacher, images, labels)
    act = cache.for_classes(classes)
    pruned = prune_network(teacher.copy(), act, plan)

    student = make_student(pruned, len(classes), policy, init_seed=seed)
    net = student.network
    fit(net, x, y, settings.epochs, settings.batch_size,
        SGD(settings.learning_rate, settings.momentum), seed)

    diff = Differentiator(net, classes, plan, policy)
    ratios = plan.for_network(net)
    unfrozen = [i for i in net.prunable_layers() if not net.frozen[i]]
    for it in range(iteration_times):
        # frozen layers keep their initial masks; act is recomputed on the current network
        act_now = profile_activations(net, x, classes, layers=unfrozen)
        for i in unfrozen:
            net.layers[i].set_mask(prune_layer(net.layers[i], act_now.scores[i], ratios[i]))
        fit(net, x, y, settings.epochs_per_iteration, settings.batch_size,
            SGD(settings.learning_rate, settings.momentum), seed + 1 + it)
        entry = {"iteration": it + 1}
        if eval_data is not None:
            ex, ey = eval_data
            m = np.isin(ey, classes)
            entry["accuracy"] = accuracy(diff, np.asarray(ex)[m], np.asarray(ey)[m])
        if snapshots:
            entry["model"] = Differentiator(net.copy(), classes, plan, policy)
        diff.history.append(entry)
    return diff


def build_multiclass_differentiator(teacher, images, labels, classes, plan, policy=None, iteration_times=5,
                                    **kw):
    """Same procedure with an m-way head for a cluster of m labels."""
    return build_differentiator(teacher, images, labels, classes, plan, policy, iteration_times, **kw)


# --------------------------------------------------------------------------- #
# Label clustering
# --------------------------------------------------------------------------- #


def _cosine_matrix(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    norms[norms == 0] = 1.0
    u = v / norms[:, None]
    return u @ u.T


def cluster_labels(profiles, num_clusters):
    """Agglomerative average-linkage clustering of labels by profile cosine similarity.

    ``profiles`` maps label to :class:`ActivationProfile` (or a raw vector).
    Returns a list of sorted label tuples, ordered by their smallest label.
    Merge ties go to the pair with the smallest labels.
    """
    labels = sorted(profiles)
    k = len(labels)
    if not 1 <= num_clusters <= k:
        raise ValueError(f"num_clusters must lie in 1..{k}")
    vecs = [p.vector() if isinstance(p, ActivationProfile) else np.ravel(p) for p in (profiles[c] for c in labels)]
    sim = _cosine_matrix(vecs)
    clusters = [[i] for i in range(k)]
    while len(clusters) > num_clusters:
        best, best_pair = -np.inf, None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                s = sim[np.ix_(clusters[a], clusters[b])].mean()
                if s > best + 1e-12:
                    best, best_pair = s, (a, b)
        a, b = best_pair
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    out = [tuple(labels[i] for i in c) for c in clusters]
    return sorted(out)
