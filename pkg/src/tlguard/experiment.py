"""Experiment pipeline: task, models, attack corpora, defended evaluation and sweeps.

Every stage is seeded from ``ExperimentConfig.seed``, so identical configs
produce identical reports (with ``report.timing = "off"`` the CSV output is
byte-identical; wall-clock columns naturally are not).
"""

from __future__ import annotations

import contextlib
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .attack import FeatureObjective, mimic, non_targeted_attack_batch, targeted_attack_batch
from .config import ExperimentConfig
from .data import TEST, TRAIN, LabeledDataset, ingest_dataset, synth_dataset
from .defense import REJECT, DifferentiatorRegistry, VerdictTable, _two_phase
from .nn import SGD
from .pruning import ProfileCache, build_differentiator, build_multiclass_differentiator
from .transfer import accuracy, fine_tune, make_student, train_teacher

CSV_COLUMNS = ("axis_value", "accuracy", "tpr", "reject_rate_targeted", "reject_rate_nontargeted",
               "residual_targeted", "residual_nontargeted", "phase1_ms", "total_ms")


class StageError(RuntimeError):
    """A failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


# --------------------------------------------------------------------------- #
# Task and models
# --------------------------------------------------------------------------- #


def split_dataset(ds, test_fraction=0.3, seed=0):
    """Seeded per-class train/test split of a dataset loaded without one."""
    rng = np.random.default_rng([seed, 3])
    splits = np.array([TRAIN] * len(ds), dtype=object)
    for c in range(1, ds.num_classes + 1):
        idx = rng.permutation(ds.indices_of(c))
        splits[idx[:int(round(len(idx) * test_fraction))]] = TEST
    return LabeledDataset(ds.images, ds.labels, splits.astype(str), list(ds.class_names))


def load_task(cfg):
    """The Teacher's dataset and the Student's relabelled subset."""
    t = cfg.task
    with stage("dataset"):
        if t.image_dir:
            ds = split_dataset(ingest_dataset(t.image_dir), seed=t.data_seed)
        else:
            ds = synth_dataset(t.num_classes, t.per_class, t.data_seed, noise=t.noise)
        return ds, ds.subset(t.student_classes)


def build_teacher(cfg, ds):
    with stage("train-teacher"):
        return train_teacher(ds, seed=cfg.seed, epochs=cfg.task.teacher_epochs,
                             batch_size=cfg.task.batch_size, learning_rate=cfg.task.learning_rate)


def build_student(cfg, teacher, sub):
    with stage("make-student"):
        student = make_student(teacher, sub.num_classes, cfg.student.build(), init_seed=cfg.seed + 1)
        student.label_space = list(sub.class_names)
        tr = sub.train
        fine_tune(student, tr.images, tr.labels, cfg.task.student_epochs, cfg.task.batch_size,
                  SGD(cfg.task.learning_rate, 0.9), seed=cfg.seed + 1)
        return student


def build_registry(cfg, teacher, sub, plan=None, seed_offset=0, snapshots=False, workers=1):
    """Pairwise-complete registry over the Student's label space.

    ``plan``/``seed_offset`` let the adaptive attacker rebuild a shadow copy.
    """
    d = cfg.differentiator
    plan = plan or d.plan()
    tr, te = sub.train, sub.test
    cache = ProfileCache(teacher, tr.images, tr.labels)
    pairs = list(itertools.combinations(range(1, sub.num_classes + 1), 2))
    for c in range(1, sub.num_classes + 1):
        cache.per_class(c)

    def one(j_pair):
        j, pair = j_pair
        return build_differentiator(teacher, tr.images, tr.labels, pair, plan, d.policy(), d.iterations,
                                    settings=d.settings(), seed=cfg.seed + 100 + seed_offset + j, cache=cache,
                                    eval_data=(te.images, te.labels), snapshots=snapshots)

    with stage("build-registry"):
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as ex:
                diffs = list(ex.map(one, enumerate(pairs)))
        else:
            diffs = [one(jp) for jp in enumerate(pairs)]
        reg = DifferentiatorRegistry(sub.num_classes, diffs)
        reg.teacher = teacher
        return reg


def cluster_registry(cfg, teacher, sub, clusters, seed_offset=0):
    """Per-class-complete registry of one multi-class differentiator per label cluster."""
    d = cfg.differentiator
    tr, te = sub.train, sub.test
    cache = ProfileCache(teacher, tr.images, tr.labels)
    with stage("build-registry"):
        diffs = [build_multiclass_differentiator(teacher, tr.images, tr.labels, tuple(cl), d.plan(), d.policy(),
                                                 d.iterations, settings=d.settings(),
                                                 seed=cfg.seed + 100 + seed_offset + j, cache=cache,
                                                 eval_data=(te.images, te.labels))
                 for j, cl in enumerate(clusters)]
        reg = DifferentiatorRegistry(sub.num_classes, diffs)
        reg.teacher = teacher
        return reg


def snapshot_registry(registry, iteration):
    """Registry of the differentiators as they were after ``iteration`` prune/retrain rounds."""
    out = DifferentiatorRegistry(registry.num_classes)
    for _, d in registry.items():
        snap = d.history[iteration - 1].get("model")
        if snap is None:
            raise ValueError("registry was built without snapshots")
        out.add(snap)
    out.teacher = getattr(registry, "teacher", None)
    return out


# --------------------------------------------------------------------------- #
# Attack corpora
# --------------------------------------------------------------------------- #


@dataclass
class Corpus:
    """Adversarial images with the labels that define attack success."""

    images: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    dssim: np.ndarray
    distance: np.ndarray
    budget_satisfied: np.ndarray
    targeted: bool
    attack_layer: int = -1
    budget: float = float("nan")

    def __len__(self):
        return len(self.source_labels)

    def records(self, undefended, defended):
        mode = "targeted" if self.targeted else "nontargeted"
        return [{
            "mode": mode, "source_id": int(self.source_ids[i]), "target_id": int(self.target_ids[i]),
            "source_label": int(self.source_labels[i]), "target_label": int(self.target_labels[i]),
            "attack_layer": int(self.attack_layer), "budget": float(self.budget),
            "achieved_dssim": float(self.dssim[i]), "achieved_distance": float(self.distance[i]),
            "budget_satisfied": bool(self.budget_satisfied[i]),
            "prediction_undefended": int(undefended[i]), "prediction_defended": int(defended[i]),
        } for i in range(len(self))]


def draw_pairs(labels, count, seed):
    """Seeded (source, target) index pairs over a test split with differing labels."""
    rng = np.random.default_rng([seed, 11])
    labels = np.asarray(labels)
    src = rng.choice(len(labels), count, replace=count > len(labels))
    tgt = np.empty(count, dtype=int)
    for i, s in enumerate(src):
        others = np.flatnonzero(labels != labels[s])
        tgt[i] = others[rng.integers(len(others))]
    return src, tgt


def draw_candidates(labels, count, num_candidates, seed):
    """Seeded sources, each with one candidate target from ``num_candidates`` other classes."""
    rng = np.random.default_rng([seed, 12])
    labels = np.asarray(labels)
    src = rng.choice(len(labels), count, replace=count > len(labels))
    classes = np.unique(labels)
    cands = []
    for s in src:
        other = [c for c in classes if c != labels[s]]
        picked = rng.permutation(other)[:num_candidates]
        cands.append([int(rng.choice(np.flatnonzero(labels == c))) for c in picked])
    width = min(len(c) for c in cands)
    return src, np.array([c[:width] for c in cands])


def _chunks(n, size):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def targeted_corpus(net, test, cfg, layer=None, budget=None, heads_for=None, seed=None):
    """Targeted feature-mimicry attacks on ``net`` over seeded test pairs.

    ``heads_for(target_label)`` may add extra ``(network, layer)`` heads for
    an attacker who also models the defense; pairs are then grouped by target.
    """
    a = cfg.attack
    acfg = a.build(**{k: v for k, v in (("attack_layer", layer), ("budget", budget)) if v is not None})
    seed = cfg.seed if seed is None else seed
    src, tgt = draw_pairs(test.labels, a.targeted_pairs, seed)
    xs, xt = test.images[src], test.images[tgt]
    n = len(src)
    out_x = np.empty_like(xs)
    dist, ds, ok = np.empty(n), np.empty(n), np.empty(n, dtype=bool)
    groups = [np.arange(n)] if heads_for is None else [
        np.flatnonzero(test.labels[tgt] == c) for c in np.unique(test.labels[tgt])]
    with stage("attack"):
        for g in groups:
            extra = [] if heads_for is None else heads_for(int(test.labels[tgt[g[0]]]))
            obj = FeatureObjective([(net, acfg.attack_layer), *extra], acfg.metric)
            for sl in _chunks(len(g), a.batch_size):
                idx = g[sl]
                res = mimic(obj, xs[idx], xt[idx], acfg)
                out_x[idx], dist[idx], ds[idx], ok[idx] = res.images, res.distance, res.dssim, res.budget_satisfied
    return Corpus(out_x, test.labels[src], test.labels[tgt], src, tgt, ds, dist, ok, True,
                  acfg.attack_layer, acfg.budget)


def nontargeted_corpus(net, test, cfg, layer=None, budget=None):
    """Non-targeted attacks: per source, the candidate target with the closest internal match."""
    a = cfg.attack
    acfg = a.build(**{k: v for k, v in (("attack_layer", layer), ("budget", budget)) if v is not None})
    src, cands = draw_candidates(test.labels, a.nontargeted_sources, a.candidate_count, cfg.seed)
    n, m = cands.shape if len(src) else (0, 0)
    out_x = np.empty((n,) + test.images.shape[1:], dtype=np.float32)
    dist, ds, ok = np.empty(n), np.empty(n), np.empty(n, dtype=bool)
    chosen_ids = np.empty(n, dtype=int)
    per = max(1, a.batch_size // max(m, 1))
    with stage("attack"):
        for sl in _chunks(n, per):
            res, chosen = non_targeted_attack_batch(net, test.images[src[sl]], test.images[cands[sl]], acfg)
            out_x[sl], dist[sl], ds[sl], ok[sl] = res.images, res.distance, res.dssim, res.budget_satisfied
            chosen_ids[sl] = cands[sl][np.arange(len(chosen)), chosen]
    return Corpus(out_x, test.labels[src], test.labels[chosen_ids], src, chosen_ids, ds, dist, ok, False,
                  acfg.attack_layer, acfg.budget)


def empty_corpus(test, targeted):
    z = np.zeros(0, dtype=int)
    return Corpus(np.zeros((0,) + test.images.shape[1:], np.float32), z, z, z, z, np.zeros(0), np.zeros(0),
                  np.zeros(0, bool), targeted)


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #


def attack_success(pred, corpus):
    """Per example: the attack goal is met (target hit, or source label lost)."""
    pred = np.asarray(pred)
    if corpus.targeted:
        return pred == corpus.target_labels
    return (pred != corpus.source_labels) & (pred != REJECT)


def adversarial_rates(final, corpus):
    """Rejection rate, residual success and accepted-but-harmless rate; they sum to 1."""
    if len(corpus) == 0:
        return float("nan"), float("nan"), float("nan")
    final = np.asarray(final)
    rejected = final == REJECT
    residual = ~rejected & attack_success(final, corpus)
    return float(rejected.mean()), float(residual.mean()), float((~rejected & ~residual).mean())


def timed_queries(student, registry, images, ens, count):
    """Mean per-query wall time (ms) of phase 1 and of full two-phase inference."""
    phase1, total = [], []
    for i, x in enumerate(images[:count]):
        t0 = time.perf_counter()
        pre = int(student.predict(x))
        t1 = time.perf_counter()
        _two_phase(pre, lambda key: registry[key].predict(x), registry, ens, i)
        t2 = time.perf_counter()
        phase1.append((t1 - t0) * 1e3)
        total.append((t2 - t0) * 1e3)
    return float(np.mean(phase1)), float(np.mean(total))


class Evaluator:
    """Caches student/differentiator verdicts so ensemble settings are cheap to vary."""

    def __init__(self, student, registry, test, corpora):
        self.student = student
        self.registry = registry
        self.test = test
        self.clean = VerdictTable(student, registry, test.images)
        self.corpora = corpora
        self.tables = {k: VerdictTable(student, registry, c.images) for k, c in corpora.items()}

    def undefended(self):
        out = {"accuracy": float(np.mean(self.clean.student == self.test.labels))}
        for k, c in self.corpora.items():
            out[f"success_{k}"] = float(attack_success(self.tables[k].student, c).mean()) if len(c) else float("nan")
        return out

    def row(self, ens, axis_value, timing="off", timing_queries=20):
        clean = self.clean.two_phase(ens)
        final = np.array([p.label for p in clean])
        row = {"axis_value": axis_value,
               "accuracy": float(np.mean(self.clean.student == self.test.labels)),
               "tpr": float(np.mean(final == self.test.labels))}
        defended = {}
        for k in ("targeted", "nontargeted"):
            c = self.corpora.get(k)
            if c is None:
                row[f"reject_rate_{k}"] = row[f"residual_{k}"] = row[f"harmless_{k}"] = float("nan")
                continue
            preds = self.tables[k].two_phase(ens)
            defended[k] = np.array([p.label for p in preds], dtype=int)
            rej, res, harmless = adversarial_rates(defended[k], c)
            row[f"reject_rate_{k}"], row[f"residual_{k}"], row[f"harmless_{k}"] = rej, res, harmless
        if timing == "wall":
            row["phase1_ms"], row["total_ms"] = timed_queries(self.student, self.registry, self.test.images,
                                                             ens, timing_queries)
        else:
            row["phase1_ms"] = row["total_ms"] = None
        return row, defended

    def records(self, defended):
        out = []
        for k, c in self.corpora.items():
            if k in defended:
                out += c.records(self.tables[k].student, defended[k])
        return out

    def voting(self, kind="targeted"):
        """Fraction of the corpus that voting labels with the true source label."""
        c = self.corpora[kind]
        labels = np.array([p.label for p in self.tables[kind].voting()])
        return float(np.mean(labels == c.source_labels))


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


@dataclass
class MetricsReport:
    axis: str
    rows: list = field(default_factory=list)
    undefended: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"axis": self.axis, "rows": self.rows, "undefended": self.undefended, "extra": self.extra,
                "records": self.records, "config": self.config}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, d):
        return cls(d["axis"], d.get("rows", []), d.get("undefended", []), d.get("extra", {}),
                   d.get("records", []), d.get("config", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def column(self, name):
        return [r[name] for r in self.rows]


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --------------------------------------------------------------------------- #
# Drivers
# --------------------------------------------------------------------------- #


@dataclass
class Artifacts:
    """Models shared between stages; any of them may be supplied pre-built."""

    dataset: LabeledDataset | None = None
    subset: LabeledDataset | None = None
    teacher: object = None
    student: object = None
    registry: DifferentiatorRegistry | None = None

    def ensure(self, cfg, registry=True, snapshots=False):
        if self.dataset is None or self.subset is None:
            self.dataset, self.subset = load_task(cfg)
        if self.teacher is None:
            self.teacher = build_teacher(cfg, self.dataset)
        if self.student is None:
            self.student = build_student(cfg, self.teacher, self.subset)
        need_snap = snapshots and self.registry is not None and not all(
            "model" in d.history[0] for _, d in self.registry.items() if d.history)
        if registry and (self.registry is None or need_snap):
            self.registry = build_registry(cfg, self.teacher, self.subset, snapshots=snapshots)
        if self.registry is not None and getattr(self.registry, "teacher", None) is None:
            self.registry.teacher = self.teacher
        return self


def attack_corpora(cfg, art, layer=None, budget=None):
    net = art.student.network
    test = art.subset.test
    out = {"targeted": targeted_corpus(net, test, cfg, layer, budget)}
    if cfg.attack.nontargeted_sources:
        out["nontargeted"] = nontargeted_corpus(net, test, cfg, layer, budget)
    return out


def run_experiment(cfg: ExperimentConfig, artifacts=None, corpora=None):
    """Train/load models, attack, evaluate undefended and defended, sweep one axis."""
    art = (artifacts or Artifacts()).ensure(cfg, snapshots=cfg.sweep.axis == "iteration_count")
    axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    if axis == "adaptive_knowledge":
        return adaptive_eval(cfg, art)
    test = art.subset.test
    rep = MetricsReport(axis, config=cfg.to_dict())
    base_corpora = None
    if axis not in ("attack_layer", "budget"):
        base_corpora = corpora or attack_corpora(cfg, art)
        ev = Evaluator(art.student, art.registry, test, base_corpora)
    timing, tq = cfg.report.timing, cfg.report.timing_queries
    with stage("evaluate"):
        for i, v in enumerate(values):
            ens = cfg.ensemble.build(cfg.seed)
            if axis == "differentiator_count":
                ens = cfg.ensemble.build(cfg.seed, size=int(v), threshold=min(cfg.ensemble.threshold, int(v)))
            elif axis == "threshold":
                ens = cfg.ensemble.build(cfg.seed, threshold=int(v))
            elif axis in ("attack_layer", "budget"):
                kw = {"layer": int(v)} if axis == "attack_layer" else {"budget": float(v)}
                ev = Evaluator(art.student, art.registry, test, attack_corpora(cfg, art, **kw))
            elif axis == "iteration_count":
                reg = snapshot_registry(art.registry, int(v))
                ev = Evaluator(art.student, reg, test, base_corpora)
                rep.extra.setdefault("differentiator_accuracy", []).append(
                    differentiator_accuracy(reg, test))
            row, defended = ev.row(ens, v, timing, tq)
            rep.rows.append(row)
            rep.undefended.append(dict(ev.undefended(), axis_value=v))
            if i == 0:
                rep.records = ev.records(defended)
        if base_corpora is not None and art.registry.is_pairwise_complete():
            rep.extra["voting_source_rate"] = ev.voting("targeted")
    return rep


def differentiator_accuracy(registry, test):
    """Mean over differentiators of held-out accuracy on their own classes."""
    accs = []
    for key, d in registry.items():
        m = np.isin(test.labels, key)
        accs.append(accuracy(d, test.images[m], test.labels[m]))
    return float(np.mean(accs))


def attacker_pick(plain, joint, student, registry):
    """Per pair, keep whichever candidate the attacker's own copy of the defense likes more.

    The score is whether the Student hits the target plus how many of
    ``registry``'s differentiators covering the target also answer it; ties
    keep the plain example.
    """
    def score(c):
        hit = np.asarray(student.predict(c.images)) == c.target_labels
        votes = np.zeros(len(c))
        for key, d in registry.items():
            covers = np.isin(c.target_labels, key)
            votes += covers & (np.asarray(d.predict(c.images)) == c.target_labels)
        return hit * (1 + votes)

    take = score(joint) > score(plain)
    out = Corpus(**{f: getattr(plain, f) for f in plain.__dataclass_fields__})
    for f in ("images", "dssim", "distance", "budget_satisfied"):
        merged = np.array(getattr(plain, f), copy=True)
        merged[take] = getattr(joint, f)[take]
        setattr(out, f, merged)
    return out, float(take.mean()) if len(take) else float("nan")


def adaptive_eval(cfg, artifacts=None, modes=None):
    """Residual success for attackers who know nothing, the ratios only roughly, or everything.

    * ``unknown``: attacks on the Student alone.
    * ``ratios``: the attacker rebuilds a shadow registry with every nonzero
      ratio moved by +-``differentiator.ratio_delta`` (and its own seeds),
      attacks the Student together with the shadow differentiators covering
      the target class, and per pair submits whichever of that joint example
      and the plain one its shadow defense accepts more readily.
    * ``known``: the same, with the deployed differentiators in place of the
      shadow.
    Success is always judged against the deployed ensemble.
    """
    art = (artifacts or Artifacts()).ensure(cfg)
    modes = list(modes or (cfg.sweep.values if cfg.sweep.axis == "adaptive_knowledge" else
                           ("unknown", "ratios", "known")))
    bad = [m for m in modes if m not in ("unknown", "ratios", "known")]
    if bad:
        raise ValueError(f"unknown adaptive mode {bad[0]!r}")
    test = art.subset.test
    layer = cfg.attack.layer
    rep = MetricsReport("adaptive_knowledge", config=cfg.to_dict())
    ens = cfg.ensemble.build(cfg.seed)

    def heads(reg):
        return lambda t: [(reg[key].network, layer) for key in reg.for_class(t)]

    plain = targeted_corpus(art.student.network, test, cfg)
    for i, mode in enumerate(modes):
        if mode == "unknown":
            corpus = plain
        else:
            if mode == "ratios":
                rng = np.random.default_rng([cfg.seed, 21])
                plan = cfg.differentiator.plan().perturbed(cfg.differentiator.ratio_delta, rng)
                rep.extra["shadow_ratios"] = plan.ratios
                model = build_registry(cfg, art.teacher, art.subset, plan=plan, seed_offset=1000)
            else:
                model = art.registry
            joint = targeted_corpus(art.student.network, test, cfg, heads_for=heads(model))
            corpus, frac = attacker_pick(plain, joint, art.student, model)
            rep.extra[f"joint_fraction_{mode}"] = frac
        ev = Evaluator(art.student, art.registry, test, {"targeted": corpus})
        with stage("evaluate"):
            row, defended = ev.row(ens, mode, cfg.report.timing, cfg.report.timing_queries)
        rep.rows.append(row)
        rep.undefended.append(dict(ev.undefended(), axis_value=mode))
        if i == 0:
            rep.records = ev.records(defended)
    return rep
