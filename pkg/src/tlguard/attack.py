"""Internal-feature mimicry attacks under a DSSIM budget, plus FGSM.

The attacker owns a feature model (the Teacher, or any network sharing its
prefix) and pushes the features of a perturbed source image at an attack
layer toward those of a target image, while the structural dissimilarity to
the source stays within the budget.  All routines are batched: one call
optimises many independent (source, target) pairs at once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import Adadelta, feature_distance

C1 = 0.01 ** 2
C2 = 0.03 ** 2
WINDOW = 8
STRIDE = 4


# --------------------------------------------------------------------------- #
# DSSIM
# --------------------------------------------------------------------------- #


def _windows(x, window, stride):
    w = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return w.reshape(w.shape[:4] + (window * window,))


def _as4d(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        return a[None], True
    if a.ndim == 4:
        return a, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {a.shape}")


def _ssim_terms(a, b, window, stride):
    wa, wb = _windows(a, window, stride), _windows(b, window, stride)
    mu_a, mu_b = wa.mean(-1), wb.mean(-1)
    da, db = wa - mu_a[..., None], wb - mu_b[..., None]
    var_a, var_b = (da * da).mean(-1), (db * db).mean(-1)
    cov = (da * db).mean(-1)
    a1 = 2 * mu_a * mu_b + C1
    a2 = 2 * cov + C2
    b1 = mu_a ** 2 + mu_b ** 2 + C1
    b2 = var_a + var_b + C2
    s = a1 * a2 / (b1 * b2)
    return s, (mu_a, mu_b, da, db, a1, a2, b1, b2)


def dssim(a, b, window=WINDOW, stride=STRIDE):
    """Structural dissimilarity ``(1 - mean SSIM) / 2``.

    SSIM is evaluated on ``window x window`` patches taken every ``stride``
    pixels with uniform weights, per channel, then averaged.  Accepts single
    images or batches (returns one value per image).
    """
    a4, single = _as4d(a)
    b4, _ = _as4d(b)
    if a4.shape != b4.shape:
        raise ValueError(f"shape mismatch {a4.shape} vs {b4.shape}")
    s, _ = _ssim_terms(a4, b4, window, stride)
    d = (1 - s.reshape(len(s), -1).mean(axis=1)) / 2
    return float(d[0]) if single else d


def dssim_grad(a, b, window=WINDOW, stride=STRIDE):
    """DSSIM per image and its gradient with respect to ``a``."""
    a4, single = _as4d(a)
    b4, _ = _as4d(b)
    s, (mu_a, mu_b, da, db, a1, a2, b1, b2) = _ssim_terms(a4, b4, window, stride)
    n = window * window
    ds_dmu = 2 * mu_b * a2 / (b1 * b2) - s * 2 * mu_a / b1
    ds_dvar = -s / b2
    ds_dcov = 2 * a1 / (b1 * b2)
    g_win = (ds_dmu[..., None] + ds_dvar[..., None] * 2 * da + ds_dcov[..., None] * db) / n
    n_win = s.shape[1] * s.shape[2] * s.shape[3]
    g_win *= -0.5 / n_win
    g = np.zeros_like(a4)
    gh, gw = s.shape[2], s.shape[3]
    g_win = g_win.reshape(g_win.shape[:4] + (window, window))
    for i in range(gh):
        for j in range(gw):
            g[:, :, i * stride:i * stride + window, j * stride:j * stride + window] += g_win[:, :, i, j]
    d = (1 - s.reshape(len(s), -1).mean(axis=1)) / 2
    return (float(d[0]), g[0]) if single else (d, g)


# --------------------------------------------------------------------------- #
# Configuration and results
# --------------------------------------------------------------------------- #


@dataclass
class AttackConfig:
    attack_layer: int
    budget: float = 0.003
    metric: str = "sq_l2"
    iterations: int = 2000
    learning_rate: float = 1.0
    rho: float = 0.95
    epsilon: float = 1e-6
    penalty_weight: float = 1e4
    candidate_count: int = 5
    normalize: bool = True

    def __post_init__(self):
        if not 0 < self.budget <= 0.5:
            raise ValueError("budget must lie in (0, 0.5]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")
        if self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be positive")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return AttackConfig(**d)


@dataclass
class AttackPair:
    source: np.ndarray
    source_label: int
    target: np.ndarray
    target_label: int
    source_id: int = -1
    target_id: int = -1

    def __post_init__(self):
        if self.source_label == self.target_label:
            raise ValueError("source and target labels must differ")


@dataclass
class AdversarialExample:
    image: np.ndarray
    source_label: int
    target_label: int
    source_id: int
    target_id: int
    attack_layer: int
    budget: float
    achieved_dssim: float
    achieved_distance: float
    initial_distance: float
    budget_satisfied: bool
    history: list = field(default_factory=list, repr=False)

    def record(self):
        return {
            "source_id": self.source_id,
            "target_id": self.target_id,
            "source_label": self.source_label,
            "target_label": self.target_label,
            "attack_layer": self.attack_layer,
            "budget": self.budget,
            "achieved_dssim": self.achieved_dssim,
            "achieved_distance": self.achieved_distance,
            "budget_satisfied": self.budget_satisfied,
        }


@dataclass
class AttackBatch:
    """Result of a batched run; ``distance`` and ``dssim`` are per example."""

    images: np.ndarray
    distance: np.ndarray
    initial_distance: np.ndarray
    dssim: np.ndarray
    budget_satisfied: np.ndarray
    history: np.ndarray | None = None


# --------------------------------------------------------------------------- #
# Feature mimicry
# --------------------------------------------------------------------------- #


class FeatureObjective:
    """Sum of feature distances over one or more (network, layer) heads.

    A single head is the plain attack; several heads model an attacker who
    tries to fool a known ensemble at once.
    """

    def __init__(self, heads, metric="sq_l2", balanced=True):
        self.heads = list(heads)
        self.metric = metric
        self.balanced = balanced and len(self.heads) > 1
        self.scales = None

    def targets(self, xt):
        return [net.forward_to_layer(xt, k) for net, k in self.heads]

    def calibrate(self, xs, targets):
        """With ``balanced``, weight each head by 1 / its distance at ``xs`` so no head dominates."""
        self.scales = None
        if self.balanced:
            raw = [feature_distance(net.forward_to_layer(xs, k), tgt, self.metric)[0]
                   for (net, k), tgt in zip(self.heads, targets)]
            self.scales = [np.where(r > 0, 1.0 / np.maximum(r, 1e-30), 0.0) for r in raw]

    def _weight(self, h, sel):
        if self.scales is None:
            return 1.0
        w = self.scales[h]
        return w if sel is None else w[sel]

    def value_and_grad(self, x, targets, sel=None):
        total, grad = None, None
        for h, ((net, k), tgt) in enumerate(zip(self.heads, targets)):
            tr = net.trace(x.astype(net.dtype), upto=k)
            d, g = feature_distance(tr.outputs[-1], tgt, self.metric)
            w = self._weight(h, sel)
            if self.scales is not None:
                g = g * w.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype)
            dx, _ = net.backward_from(x, tr, g, param_grads=False)
            total = d * w if total is None else total + d * w
            grad = dx if grad is None else grad + dx
        return total, grad

    def value(self, x, targets, sel=None):
        total = None
        for h, ((net, k), tgt) in enumerate(zip(self.heads, targets)):
            d, _ = feature_distance(net.forward_to_layer(x, k), tgt, self.metric)
            d = d * self._weight(h, sel)
            total = d if total is None else total + d
        return total


def _project_to_budget(x, xs, budget, steps=20):
    """Shrink ``x - xs`` by bisection until DSSIM to ``xs`` is within budget."""
    lo = np.zeros(len(x))
    hi = np.ones(len(x))
    for _ in range(steps):
        mid = (lo + hi) / 2
        cand = xs + (x - xs) * mid[:, None, None, None]
        ok = dssim(cand, xs) <= budget
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return (xs + (x - xs) * lo[:, None, None, None]).astype(x.dtype)


def mimic(objective, xs, xt, cfg, record_history=False):
    """Batched penalty-method solve of  min D(H(x'), H(xt))  s.t. DSSIM(x', xs) <= P.

    Runs Adadelta on ``D / D0 + lambda * max(0, DSSIM - P)^2`` with pixel
    clamping, keeping the best budget-feasible iterate per example.  ``D0`` is
    the starting distance (``cfg.normalize``); without it the penalty weight
    has to be retuned for every layer and metric.
    """
    xs = np.asarray(xs, dtype=np.float32)
    xt = np.asarray(xt, dtype=np.float32)
    targets = objective.targets(xt)
    objective.calibrate(xs, targets)
    x = xs.copy()
    d0 = objective.value(xs, targets)
    best_x, best_d = xs.copy(), d0.copy()
    history = [best_d.copy()] if record_history else None
    opt = Adadelta(cfg.rho, cfg.epsilon, cfg.learning_rate)
    active = d0 > 0
    if active.any():
        for _ in range(cfg.iterations):
            d, g = objective.value_and_grad(x, targets)
            ds, dg = dssim_grad(x, xs)
            ok = ds <= cfg.budget
            better = ok & (d < best_d)
            best_x[better] = x[better]
            best_d[better] = d[better]
            if record_history:
                history.append(best_d.copy())
            if cfg.normalize:
                g = g / np.where(active, d0, 1.0)[:, None, None, None]
            excess = np.maximum(ds - cfg.budget, 0)
            g = g + (cfg.penalty_weight * 2 * excess)[:, None, None, None] * dg
            g[~active] = 0
            x = np.clip(x + opt.delta("x", g.astype(np.float32)), 0, 1).astype(np.float32)
        d = objective.value(x, targets)
        ds = dssim(x, xs)
        better = (ds <= cfg.budget) & (d < best_d)
        best_x[better] = x[better]
        best_d[better] = d[better]
    final_ds = dssim(best_x, xs)
    satisfied = final_ds <= cfg.budget + 1e-6
    if not satisfied.all():
        bad = ~satisfied
        best_x[bad] = _project_to_budget(best_x[bad], xs[bad], cfg.budget)
        best_d[bad] = objective.value(best_x[bad], [t[bad] for t in targets], sel=bad)
        final_ds = dssim(best_x, xs)
    return AttackBatch(best_x, best_d, d0, final_ds, satisfied,
                       np.array(history) if record_history else None)


def targeted_attack_batch(net, xs, xt, cfg, extra_heads=(), record_history=False):
    """Mimic ``xt`` features at ``cfg.attack_layer`` of ``net`` for each source."""
    if not 0 <= cfg.attack_layer < len(net):
        raise IndexError(f"attack layer {cfg.attack_layer} out of range")
    obj = FeatureObjective([(net, cfg.attack_layer), *extra_heads], cfg.metric)
    return mimic(obj, xs, xt, cfg, record_history)


def targeted_attack(net, pair, cfg, record_history=False):
    res = targeted_attack_batch(net, pair.source[None], pair.target[None], cfg, record_history=record_history)
    return AdversarialExample(
        res.images[0], pair.source_label, pair.target_label, pair.source_id, pair.target_id,
        cfg.attack_layer, cfg.budget, float(res.dssim[0]), float(res.distance[0]),
        float(res.initial_distance[0]), bool(res.budget_satisfied[0]),
        [] if res.history is None else res.history[:, 0].tolist(),
    )


def non_targeted_attack(net, source, source_label, candidates, cfg, source_id=-1):
    """Attack every candidate target and keep the closest internal match.

    ``candidates`` is a list of ``(image, label, id)`` with labels different
    from ``source_label``.
    """
    if not candidates:
        raise ValueError("no candidate targets")
    if any(lbl == source_label for _, lbl, _ in candidates):
        raise ValueError("candidate labels must differ from the source label")
    xt = np.stack([c[0] for c in candidates])
    xs = np.repeat(np.asarray(source)[None], len(candidates), axis=0)
    res = targeted_attack_batch(net, xs, xt, cfg)
    best = int(np.argmin(res.distance))
    _, lbl, tid = candidates[best]
    ex = AdversarialExample(
        res.images[best], source_label, lbl, source_id, tid, cfg.attack_layer, cfg.budget,
        float(res.dssim[best]), float(res.distance[best]), float(res.initial_distance[best]),
        bool(res.budget_satisfied[best]),
    )
    ex.history = res.distance.tolist()
    return ex


def non_targeted_attack_batch(net, xs, xt_candidates, cfg, extra_heads=()):
    """``xt_candidates`` is ``(N, M, C, H, W)``; returns the best candidate per source.

    Returns ``(AttackBatch, chosen)`` with ``chosen[i]`` the winning candidate index.
    """
    n, m = xt_candidates.shape[:2]
    flat_t = xt_candidates.reshape((n * m,) + xt_candidates.shape[2:])
    flat_s = np.repeat(np.asarray(xs), m, axis=0)
    res = targeted_attack_batch(net, flat_s, flat_t, cfg, extra_heads)
    dist = res.distance.reshape(n, m)
    chosen = np.argmin(dist, axis=1)
    pick = np.arange(n) * m + chosen
    out = AttackBatch(res.images[pick], res.distance[pick], res.initial_distance[pick],
                      res.dssim[pick], res.budget_satisfied[pick])
    return out, chosen


def layer_sweep(net, xs, xt, target_labels, cfg, victim=None, layers=None):
    """Undefended targeted success per attack layer; best layer = argmax, ties to the shallowest.

    ``victim`` is the model whose predictions decide success (defaults to
    ``net``).  Eligible layers exclude the final classification head.
    """
    if len(xs) == 0:
        raise ValueError("empty pair set")
    victim = victim or net
    layers = list(range(len(net) - 1)) if layers is None else list(layers)
    table = {}
    for k in layers:
        res = targeted_attack_batch(net, xs, xt, cfg.replace(attack_layer=k))
        table[k] = float(np.mean(victim.predict(res.images) == np.asarray(target_labels)))
    best = max(layers, key=lambda k: (table[k], -k))
    return table, best


# --------------------------------------------------------------------------- #
# FGSM
# --------------------------------------------------------------------------- #


def fgsm(net, x, label, epsilon):
    """``clip(x + epsilon * sign(d loss / d x), 0, 1)``; works on one image or a batch."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    xb = np.asarray(x, dtype=net.dtype)
    single = xb.shape == net.input_shape
    if single:
        xb = xb[None]
    labels = np.atleast_1d(np.asarray(label))
    _, _, dx = net.loss_and_grads(xb, labels, param_grads=False, input_grad=True)
    out = np.clip(xb + epsilon * np.sign(dx), 0, 1).astype(np.float32)
    return out[0] if single else out
