"""Teacher construction, Student derivation and freeze-aware fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DTYPE, SGD, Dense, Network, ReLU, Flatten, conv2d, dense, glorot_uniform, train_step

DEEP = "deep"
MID = "mid"
FULL = "full"


@dataclass(frozen=True)
class FreezePolicy:
    """Which leading layers stay frozen in a Student.

    ``cutoff`` is the number of leading layers frozen, so ``mid(10)`` on a
    16-layer network freezes layers 1..10 and trains 11..16.  ``deep()``
    freezes everything except the classification head.
    """

    kind: str = DEEP
    cutoff: int | None = None

    @classmethod
    def deep(cls):
        return cls(DEEP)

    @classmethod
    def mid(cls, cutoff):
        return cls(MID, int(cutoff))

    @classmethod
    def full(cls):
        return cls(FULL)

    def frozen_flags(self, n_layers):
        if self.kind == FULL:
            n = 0
        elif self.kind == DEEP:
            n = n_layers - 1
        elif self.kind == MID:
            if self.cutoff is None or not 0 <= self.cutoff < n_layers:
                raise ValueError(f"cutoff must lie in [0, {n_layers})")
            n = self.cutoff
        else:
            raise ValueError(f"unknown freeze policy {self.kind!r}")
        return [i < n for i in range(n_layers)]

    def to_dict(self):
        return {"kind": self.kind, "cutoff": self.cutoff}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("cutoff"))


@dataclass
class StudentModel:
    network: Network
    teacher_id: str
    policy: FreezePolicy
    label_space: list
    loss_history: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.network.num_classes

    def predict(self, x):
        return self.network.predict(x)


def desk_teacher(num_classes=10, seed=0, input_shape=(1, 24, 24), filters=(8, 16, 32), hidden=64,
                 strides=(1, 2, 2)):
    """Three 3x3 conv blocks, Flatten, Dense(hidden), Dense(num_classes)."""
    rng = np.random.default_rng(seed)
    layers, c = [], input_shape[0]
    for f, s in zip(filters, strides):
        layers += [conv2d(rng, c, f, k=3, stride=s, padding=1), ReLU()]
        c = f
    layers.append(Flatten())
    shape = input_shape
    for l in layers:
        shape = l.out_shape(shape)
    layers += [dense(rng, shape[0], hidden), ReLU(), dense(rng, hidden, num_classes, init="glorot")]
    return Network(layers, input_shape)


def new_head(rng, n_in, n_out):
    w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    return Dense(w, np.zeros(n_out, dtype=DTYPE))


def make_student(teacher, num_classes, policy=None, init_seed=0, teacher_id="teacher"):
    """Copy every layer but the head from ``teacher`` and attach a fresh head."""
    if num_classes < 2:
        raise ValueError("a student needs at least 2 classes")
    policy = policy or FreezePolicy.deep()
    net = teacher.copy()
    head = net.layers[-1]
    net.layers[-1] = new_head(np.random.default_rng(init_seed), head.weight.shape[1], num_classes)
    net = Network(net.layers, net.input_shape, policy.frozen_flags(len(net.layers)))
    return StudentModel(net, teacher_id, policy, [str(i) for i in range(1, num_classes + 1)])


def batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def fit(net, images, labels, epochs=30, batch_size=32, optimizer=None, seed=0, on_epoch=None):
    """Minibatch training of ``net`` in place; returns per-epoch training losses.

    Losses are measured on the full training set after each epoch.
    """
    images = np.asarray(images, dtype=net.dtype)
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    k = net.num_classes
    if labels.min() < 1 or labels.max() > k:
        raise ValueError(f"labels must lie in 1..{k}")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    optimizer = optimizer or SGD()
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        for idx in batches(len(labels), batch_size, rng):
            train_step(net, images[idx], labels[idx], optimizer)
        history.append(dataset_loss(net, images, labels))
        if on_epoch is not None:
            on_epoch(epoch, net)
    return history


def dataset_loss(net, images, labels, batch_size=512):
    total = 0.0
    for i in range(0, len(labels), batch_size):
        sl = slice(i, i + batch_size)
        total += net.loss(images[sl], labels[sl]) * len(labels[sl])
    return total / len(labels)


def accuracy(model, images, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images) == np.asarray(labels)))


def fine_tune(student, images, labels, epochs=30, batch_size=32, optimizer=None, seed=0):
    """Train the unfrozen layers of ``student`` in place and return it."""
    history = fit(student.network, images, labels, epochs, batch_size, optimizer, seed)
    student.loss_history.extend(history)
    return student


def train_teacher(dataset, seed=0, epochs=30, batch_size=32, learning_rate=0.05, **arch):
    """Train the desk teacher on the training split of ``dataset``."""
    train = dataset.train
    net = desk_teacher(num_classes=dataset.num_classes, seed=seed, input_shape=train.images.shape[1:], **arch)
    fit(net, train.images, train.labels, epochs, batch_size, SGD(learning_rate, 0.9), seed)
    return net
