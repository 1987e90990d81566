"""Single-file binary archives for networks, students and differentiator registries.

Layout (all integers little-endian)::

    magic   4 bytes  b"TLGA"
    version u16
    hlen    u32      length of the JSON header
    hcrc    u32      CRC-32 of the header bytes
    header  hlen bytes of UTF-8 JSON
    blob    concatenated sections

The header holds a ``sections`` table of ``{name, offset, length, crc32}``
entries (offsets relative to the start of ``blob``) plus the model metadata.
Weight sections are float32 little-endian, parameters in layer order (weight
then bias).  Mask sections are bit-packed, one bit per maskable weight
("pruning tag"), 1 = kept.

Registries store the Teacher once.  Each differentiator keeps only its
pruning tags and the layers whose parameters differ from the Teacher's
(the new head plus any fine-tuned unfrozen layers).  Training never moves a
masked weight, so for a fine-tuned layer only the kept weights are stored
("sparse" layers); the masked ones are restored from the Teacher.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .defense import DifferentiatorRegistry
from .nn import Conv2D, Dense, Flatten, Network, ReLU
from .pruning import Differentiator, PruningPlan
from .transfer import FreezePolicy, StudentModel

MAGIC = b"TLGA"
VERSION = 1
_PREFIX = struct.Struct("<4sHII")


class ArchiveError(ValueError):
    """Malformed, truncated, corrupted or incompatible archive."""


# --------------------------------------------------------------------------- #
# Layer descriptors
# --------------------------------------------------------------------------- #


def _describe(layer):
    if isinstance(layer, Conv2D):
        return {"kind": "conv2d", "shape": list(layer.weight.shape), "stride": layer.stride,
                "padding": layer.padding}
    if isinstance(layer, Dense):
        return {"kind": "dense", "shape": list(layer.weight.shape)}
    return {"kind": layer.kind}


def _build(desc):
    kind = desc["kind"]
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    shape = tuple(desc["shape"])
    w = np.zeros(shape, dtype=np.float32)
    b = np.zeros(shape[0], dtype=np.float32)
    if kind == "conv2d":
        return Conv2D(w, b, stride=desc["stride"], padding=desc["padding"])
    if kind == "dense":
        return Dense(w, b)
    raise ArchiveError(f"unknown layer kind {kind!r}")


def _params_bytes(layers):
    parts = []
    for layer in layers:
        for p in (layer.weight, layer.bias):
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def _load_params(layers, payload):
    off = 0
    for layer in layers:
        for name in ("weight", "bias"):
            p = getattr(layer, name)
            n = p.size * 4
            if off + n > len(payload):
                raise ArchiveError("weight section too short")
            setattr(layer, name, np.frombuffer(payload, "<f4", p.size, off).astype(np.float32).reshape(p.shape))
            off += n
    if off != len(payload):
        raise ArchiveError("weight section has trailing bytes")


def _masks_bytes(layers):
    if not layers:
        return b""
    bits = np.concatenate([l.mask.ravel() != 0 for l in layers])
    return np.packbits(bits, bitorder="little").tobytes()


def _load_masks(layers, payload):
    total = sum(l.weight.size for l in layers)
    if len(payload) != math.ceil(total / 8):
        raise ArchiveError("mask section has the wrong length")
    bits = np.unpackbits(np.frombuffer(payload, np.uint8), count=total, bitorder="little")
    off = 0
    for l in layers:
        n = l.weight.size
        l.set_mask(bits[off:off + n].reshape(l.weight.shape).astype(np.float32))
        off += n


def _network_meta(net):
    return {
        "input_shape": list(net.input_shape),
        "layers": [_describe(l) for l in net.layers],
        "frozen": [bool(f) for f in net.frozen],
        "masked": [i for i, l in enumerate(net.layers) if l.has_params and l.mask is not None],
    }


def _network_sections(net, prefix):
    weighted = [l for l in net.layers if l.has_params]
    masked = [l for l in net.layers if l.has_params and l.mask is not None]
    return {f"{prefix}weights": _params_bytes(weighted), f"{prefix}masks": _masks_bytes(masked)}


def _network_from(meta, sections, prefix):
    layers = [_build(d) for d in meta["layers"]]
    _load_params([l for l in layers if l.has_params], sections[f"{prefix}weights"])
    _load_masks([layers[i] for i in meta["masked"]], sections[f"{prefix}masks"])
    return Network(layers, meta["input_shape"], meta["frozen"])


# --------------------------------------------------------------------------- #
# Container
# --------------------------------------------------------------------------- #


def write_archive(path, header, sections):
    table, offset, blobs = [], 0, []
    for name, payload in sections.items():
        table.append({"name": name, "offset": offset, "length": len(payload), "crc32": zlib.crc32(payload)})
        blobs.append(payload)
        offset += len(payload)
    header = dict(header, sections=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = _PREFIX.pack(MAGIC, VERSION, len(hbytes), zlib.crc32(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(data)
    return len(data)


def read_archive(path):
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC[:len(data)] or not data:
        raise ArchiveError("not a model archive")
    if len(data) < _PREFIX.size:
        raise ArchiveError("truncated file")
    magic, version, hlen, hcrc = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError("not a model archive")
    if version != VERSION:
        raise ArchiveError(f"archive version {version} is not supported (expected {VERSION})")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise ArchiveError("truncated file")
    hbytes = data[start:start + hlen]
    if zlib.crc32(hbytes) != hcrc:
        raise ArchiveError("header checksum failure")
    header = json.loads(hbytes)
    blob = memoryview(data)[start + hlen:]
    sections = {}
    for entry in header["sections"]:
        end = entry["offset"] + entry["length"]
        if end > len(blob):
            raise ArchiveError("truncated file")
        payload = bytes(blob[entry["offset"]:end])
        if zlib.crc32(payload) != entry["crc32"]:
            raise ArchiveError(f"checksum failure in section {entry['name']!r}")
        sections[entry["name"]] = payload
    return header, sections


# --------------------------------------------------------------------------- #
# Public save/load
# --------------------------------------------------------------------------- #


def _diff_meta(d):
    return {"classes": list(map(int, d.classes)), "plan": d.plan.ratios, "policy": d.policy.to_dict(),
            "history": [{k: v for k, v in h.items() if k != "model"} for h in d.history]}


def _diff_from_meta(net, meta):
    return Differentiator(net, tuple(meta["classes"]), PruningPlan(meta["plan"]),
                          FreezePolicy.from_dict(meta["policy"]), list(meta.get("history", [])))


def _same(a, b):
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _sparse_ok(layer, t):
    """Masked entries still hold the Teacher's values bit for bit."""
    if layer.mask is None or layer.weight.shape != t.weight.shape:
        return False
    off = layer.mask == 0
    return layer.weight[off].tobytes() == t.weight[off].tobytes()


def _private_bytes(layers, sparse):
    parts = []
    for layer, sp in zip(layers, sparse):
        w = layer.weight[layer.mask != 0] if sp else layer.weight
        for p in (w, layer.bias):
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def _load_private(layers, sparse, payload):
    off = 0
    for layer, sp in zip(layers, sparse):
        keep = layer.mask != 0 if sp else None
        for name in ("weight", "bias"):
            p = getattr(layer, name)
            n = int(keep.sum()) if (sp and name == "weight") else p.size
            if off + n * 4 > len(payload):
                raise ArchiveError("weight section too short")
            vals = np.frombuffer(payload, "<f4", n, off).astype(np.float32)
            if sp and name == "weight":
                p = p.copy()
                p[keep] = vals
            else:
                p = vals.reshape(p.shape)
            setattr(layer, name, p)
            off += n * 4
    if off != len(payload):
        raise ArchiveError("weight section has trailing bytes")


def _private_layers(net, teacher):
    out = []
    for i, (l, t) in enumerate(zip(net.layers, teacher.layers)):
        if l.has_params and not (_same(l.weight, t.weight) and _same(l.bias, t.bias)):
            out.append(i)
    return out


def save(obj, path, teacher=None):
    """Write a Network, StudentModel, Differentiator or DifferentiatorRegistry.

    Returns the number of bytes written.
    """
    if isinstance(obj, DifferentiatorRegistry):
        return _save_registry(obj, path, teacher or getattr(obj, "teacher", None))
    if isinstance(obj, Network):
        header = {"type": "network", "network": _network_meta(obj)}
        return write_archive(path, header, _network_sections(obj, ""))
    if isinstance(obj, StudentModel):
        header = {"type": "student", "network": _network_meta(obj.network), "teacher_id": obj.teacher_id,
                  "policy": obj.policy.to_dict(), "label_space": list(obj.label_space),
                  "loss_history": [float(v) for v in obj.loss_history]}
        return write_archive(path, header, _network_sections(obj.network, ""))
    if isinstance(obj, Differentiator):
        header = {"type": "differentiator", "network": _network_meta(obj.network), "meta": _diff_meta(obj)}
        return write_archive(path, header, _network_sections(obj.network, ""))
    raise TypeError(f"cannot archive {type(obj).__name__}")


def _save_registry(reg, path, teacher):
    if teacher is None:
        raise ValueError("registry archives need the shared teacher")
    header = {"type": "registry", "num_classes": reg.num_classes, "teacher": _network_meta(teacher),
              "differentiators": []}
    sections = _network_sections(teacher, "teacher/")
    for j, (key, d) in enumerate(reg.items()):
        net = d.network
        if len(net.layers) != len(teacher.layers):
            raise ValueError("differentiator does not share the teacher's architecture")
        private = _private_layers(net, teacher)
        sparse = [_sparse_ok(net.layers[i], teacher.layers[i]) for i in private]
        meta = _network_meta(net)
        meta.update(_diff_meta(d), private=private, sparse=sparse)
        header["differentiators"].append(meta)
        sections[f"d{j}/weights"] = _private_bytes([net.layers[i] for i in private], sparse)
        sections[f"d{j}/masks"] = _masks_bytes([net.layers[i] for i in meta["masked"]])
    return write_archive(path, header, sections)


def load(path):
    header, sections = read_archive(path)
    kind = header.get("type")
    if kind == "network":
        return _network_from(header["network"], sections, "")
    if kind == "student":
        net = _network_from(header["network"], sections, "")
        return StudentModel(net, header["teacher_id"], FreezePolicy.from_dict(header["policy"]),
                            header["label_space"], header.get("loss_history", []))
    if kind == "differentiator":
        return _diff_from_meta(_network_from(header["network"], sections, ""), header["meta"])
    if kind == "registry":
        return _load_registry(header, sections)
    raise ArchiveError(f"unknown archive type {kind!r}")


def _load_registry(header, sections):
    teacher = _network_from(header["teacher"], sections, "teacher/")
    reg = DifferentiatorRegistry(header["num_classes"])
    for j, meta in enumerate(header["differentiators"]):
        layers = []
        for i, desc in enumerate(meta["layers"]):
            if i in meta["private"]:
                layers.append(_build(desc))
            else:
                t = teacher.layers[i]
                layer = _build(desc)
                if layer.has_params:
                    layer.weight, layer.bias = t.weight.copy(), t.bias.copy()
                layers.append(layer)
        # masks first: sparse layers need them to place the stored weights
        _load_masks([layers[i] for i in meta["masked"]], sections[f"d{j}/masks"])
        private = [layers[i] for i in meta["private"]]
        for i in meta["private"]:
            t = teacher.layers[i]
            if layers[i].weight.shape == t.weight.shape:
                layers[i].weight = t.weight.copy()
        _load_private(private, meta["sparse"], sections[f"d{j}/weights"])
        net = Network(layers, meta["input_shape"], meta["frozen"])
        reg.add(_diff_from_meta(net, meta))
    reg.teacher = teacher
    return reg


# --------------------------------------------------------------------------- #
# Memory accounting
# --------------------------------------------------------------------------- #

MB = 1024 * 1024


def tag_bytes(tag_count):
    """Storage for ``tag_count`` one-bit pruning tags."""
    return math.ceil(tag_count / 8)


def memory_report(registry, teacher=None):
    """Bytes reused from the Teacher, private to differentiators, and spent on tags.

    Private bytes count what a registry archive stores per differentiator:
    the kept weights of fine-tuned layers, full heads and biases.
    """
    teacher = teacher or getattr(registry, "teacher", None)
    if teacher is None:
        raise ValueError("memory report needs the shared teacher")
    reused = teacher.parameter_count() * 4
    private_params, tags = 0, 0
    for _, d in registry.items():
        net = d.network
        for i in _private_layers(net, teacher):
            layer = net.layers[i]
            stored = int((layer.mask != 0).sum()) if _sparse_ok(layer, teacher.layers[i]) else layer.weight.size
            private_params += stored + layer.bias.size
        for l in net.layers:
            if l.has_params and l.mask is not None:
                tags += l.weight.size
    private = private_params * 4
    tb = tag_bytes(tags)
    total = reused + private + tb
    return {
        "reused_parameter_bytes": reused,
        "private_parameter_bytes": private,
        "tag_count": tags,
        "tag_bytes": tb,
        "total_bytes": total,
        "overhead_ratio": (total - reused) / reused,
    }


def student_memory_report(student):
    """The unguarded baseline: all parameters, no tags."""
    net = student.network if isinstance(student, StudentModel) else student
    tags = sum(l.weight.size for l in net.layers if l.has_params and l.mask is not None)
    params = net.parameter_count() * 4
    return {"reused_parameter_bytes": params, "private_parameter_bytes": 0, "tag_count": tags,
            "tag_bytes": tag_bytes(tags), "total_bytes": params + tag_bytes(tags), "overhead_ratio": 0.0}
