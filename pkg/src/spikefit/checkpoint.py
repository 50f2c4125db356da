"""Directory checkpoints: a JSON manifest describing the layer stack plus a
single weights.bin holding every tensor in the wire format, with offsets and
a digest for integrity checking."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .ann import AnnModel, Embedding, Gelu, Linear, Qcfs, Relu, Residual
from .snn import IfLayer, SnnNetwork
from .tensor import Array, decode_tensor, encode_tensor

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class IntegrityError(RuntimeError):
    """Checkpoint contents do not match their manifest."""


def weight_hash(obj) -> str:
    """Digest of the synaptic weights only (linear layers and embeddings);
    thresholds, initial potentials, and staircase caps are excluded."""
    h = hashlib.sha256()

    def feed(layers):
        for layer in layers:
            if isinstance(layer, Linear):
                h.update(np.ascontiguousarray(layer.w, dtype=np.float32).tobytes())
                h.update(np.ascontiguousarray(layer.b, dtype=np.float32).tobytes())
            elif isinstance(layer, Embedding):
                h.update(np.ascontiguousarray(layer.table, dtype=np.float32).tobytes())
            elif isinstance(layer, Residual):
                feed(layer.inner)

    if isinstance(obj, SnnNetwork):
        if obj.input_encoder is not None:
            feed([obj.input_encoder])
        feed(obj.layers)
    else:
        feed(obj.layers)
    return h.hexdigest()


class _TensorSink:
    def __init__(self):
        self.blobs: list[bytes] = []
        self.entries: list[dict] = []
        self.offset = 0

    def put(self, name: str, arr: Array) -> str:
        blob = encode_tensor(np.ascontiguousarray(arr, dtype=np.float32))
        self.entries.append({
            "name": name,
            "shape": [int(d) for d in np.shape(arr)],
            "offset": self.offset,
            "nbytes": len(blob),
        })
        self.blobs.append(blob)
        self.offset += len(blob)
        return name


def _describe_ann_layers(layers, sink: _TensorSink, prefix: str) -> list[dict]:
    out = []
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        if isinstance(layer, Linear):
            out.append({"type": "linear",
                        "w": sink.put(f"{path}.w", layer.w),
                        "b": sink.put(f"{path}.b", layer.b)})
        elif isinstance(layer, Relu):
            out.append({"type": "relu"})
        elif isinstance(layer, Gelu):
            out.append({"type": "gelu"})
        elif isinstance(layer, Qcfs):
            out.append({"type": "qcfs", "ceiling": float(layer.ceiling),
                        "levels": int(layer.levels)})
        elif isinstance(layer, Embedding):
            out.append({"type": "embedding", "table": sink.put(f"{path}.table", layer.table)})
        elif isinstance(layer, Residual):
            out.append({"type": "residual",
                        "inner": _describe_ann_layers(layer.inner, sink, f"{path}.")})
        else:
            raise TypeError(f"cannot checkpoint layer type {type(layer).__name__}")
    return out


def save_checkpoint(obj, out_dir: str) -> None:
    """Write ``manifest.json`` and ``weights.bin`` for a model or a spiking
    network; loading restores bit-identical forward behavior."""
    os.makedirs(out_dir, exist_ok=True)
    sink = _TensorSink()
    if isinstance(obj, SnnNetwork):
        layers = []
        for i, layer in enumerate(obj.layers):
            path = f"{i}"
            if isinstance(layer, Linear):
                layers.append({"type": "linear",
                               "w": sink.put(f"{path}.w", layer.w),
                               "b": sink.put(f"{path}.b", layer.b)})
            elif isinstance(layer, IfLayer):
                layers.append({"type": "if",
                               "threshold": sink.put(f"{path}.threshold", layer.threshold),
                               "v_init": sink.put(f"{path}.v_init", layer.v_init)})
            else:
                raise TypeError(f"cannot checkpoint layer type {type(layer).__name__}")
        manifest = {
            "format": "spikefit-checkpoint",
            "version": 1,
            "kind": "snn",
            "timesteps": obj.timesteps,
            "layers": layers,
            "encoder": (None if obj.input_encoder is None
                        else {"table": sink.put("encoder.table", obj.input_encoder.table)}),
        }
    elif isinstance(obj, AnnModel):
        manifest = {
            "format": "spikefit-checkpoint",
            "version": 1,
            "kind": "ann",
            "record_activations": bool(obj.record_activations),
            "layers": _describe_ann_layers(obj.layers, sink, ""),
        }
    else:
        raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")

    weights = b"".join(sink.blobs)
    manifest["tensors"] = sink.entries
    manifest["weights_sha256"] = hashlib.sha256(weights).hexdigest()
    with open(os.path.join(out_dir, WEIGHTS_NAME), "wb") as f:
        f.write(weights)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


class _TensorSource:
    def __init__(self, manifest: dict, weights: bytes):
        self.weights = weights
        self.entries = {e["name"]: e for e in manifest["tensors"]}
        total = sum(e["nbytes"] for e in manifest["tensors"])
        if total != len(weights):
            raise IntegrityError(
                f"weights.bin holds {len(weights)} bytes but the manifest expects {total}")
        digest = hashlib.sha256(weights).hexdigest()
        if digest != manifest.get("weights_sha256"):
            raise IntegrityError("weights.bin digest does not match the manifest")

    def get(self, name: str) -> Array:
        entry = self.entries.get(name)
        if entry is None:
            raise IntegrityError(f"manifest references unknown tensor {name!r}")
        blob = self.weights[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = decode_tensor(blob)
        if list(arr.shape) != entry["shape"]:
            raise IntegrityError(
                f"tensor {name!r} decoded to shape {list(arr.shape)}, manifest says {entry['shape']}")
        return arr


def _build_ann_layers(descs: list[dict], src: _TensorSource) -> list:
    out = []
    for d in descs:
        kind = d["type"]
        if kind == "linear":
            out.append(Linear(src.get(d["w"]), src.get(d["b"])))
        elif kind == "relu":
            out.append(Relu())
        elif kind == "gelu":
            out.append(Gelu())
        elif kind == "qcfs":
            out.append(Qcfs(ceiling=d["ceiling"], levels=d["levels"]))
        elif kind == "embedding":
            out.append(Embedding(src.get(d["table"])))
        elif kind == "residual":
            out.append(Residual(_build_ann_layers(d["inner"], src)))
        else:
            raise IntegrityError(f"unknown layer descriptor type {kind!r}")
    return out


def load_checkpoint(in_dir: str):
    manifest_path = os.path.join(in_dir, MANIFEST_NAME)
    weights_path = os.path.join(in_dir, WEIGHTS_NAME)
    if not os.path.exists(manifest_path) or not os.path.exists(weights_path):
        raise IntegrityError(f"no checkpoint at {in_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(weights_path, "rb") as f:
        weights = f.read()
    src = _TensorSource(manifest, weights)

    if manifest["kind"] == "ann":
        return AnnModel(_build_ann_layers(manifest["layers"], src),
                        manifest.get("record_activations", True))
    if manifest["kind"] == "snn":
        layers: list = []
        for d in manifest["layers"]:
            if d["type"] == "linear":
                layers.append(Linear(src.get(d["w"]), src.get(d["b"])))
            elif d["type"] == "if":
                layers.append(IfLayer(src.get(d["threshold"]), src.get(d["v_init"])))
            else:
                raise IntegrityError(f"unknown layer descriptor type {d['type']!r}")
        encoder = None
        if manifest.get("encoder"):
            encoder = Embedding(src.get(manifest["encoder"]["table"]))
        return SnnNetwork(layers, manifest["timesteps"], input_encoder=encoder)
    raise IntegrityError(f"unknown checkpoint kind {manifest['kind']!r}")
