"""Single-file checkpoints: magic, manifest length, JSON manifest, float32 blob.

Layout::

    b"DFKD0001" | uint64-le manifest length | manifest (UTF-8 JSON) | tensor blob

The blob holds every tensor as contiguous little-endian float32 in row-major
order; the manifest's ``tensors`` directory records name, shape, dtype and
byte offset for each.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor
from .distill import DistillPlan
from .encoder import EncoderModel, ModelConfig, param_shapes
from .qa import SpanHead

MAGIC = b"DFKD0001"
FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: EncoderModel
    head: SpanHead
    plan: DistillPlan | None = None
    metadata: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def num_scalars(self) -> int:
        n = self.model.num_params() + self.head.num_params()
        return n + (self.plan.num_params() if self.plan is not None else 0)


def _named_tensors(model: EncoderModel, head: SpanHead, plan: DistillPlan | None):
    yield from model.named_parameters()
    yield from head.named_parameters()
    if plan is not None:
        yield from plan.named_parameters()


def save_checkpoint(model: EncoderModel, head: SpanHead, plan: DistillPlan | None, path,
                    metadata: dict | None = None) -> dict:
    """Write a checkpoint and return its manifest."""
    directory, chunks, offset = [], [], 0
    for name, t in _named_tensors(model, head, plan):
        raw = np.ascontiguousarray(t.data, dtype=_BLOB_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(t.shape), "dtype": "float32",
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "head": {"hidden": model.config.hidden, "outputs": 2},
        "plan": plan.config_dict() if plan is not None else None,
        "metadata": metadata or {},
        "blob_bytes": offset,
        "tensors": directory,
    }
    header = json.dumps(manifest, indent=1, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    return manifest


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        if raw[:4] == MAGIC[:4]:
            raise VersionError(f"{path}: unsupported container version {raw[:8]!r}")
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise IntegrityError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unknown manifest version {manifest.get('format_version')!r}")
    return manifest, raw[16 + mlen:]


def _check_directory(manifest: dict, blob: bytes) -> None:
    expected = 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * _BLOB_DTYPE.itemsize
        if entry["dtype"] != "float32" or entry["nbytes"] != size or entry["offset"] != expected:
            raise IntegrityError(f"manifest entry {entry['name']} is inconsistent")
        expected += size
    if expected != manifest["blob_bytes"] or len(blob) != expected:
        raise IntegrityError(f"blob is {len(blob)} bytes, manifest expects {expected}")


def load_checkpoint(path, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Checkpoint:
    manifest, blob = read_manifest(path)
    _check_directory(manifest, blob)
    arrays = {}
    for entry in manifest["tensors"]:
        a = np.frombuffer(blob, dtype=_BLOB_DTYPE, count=entry["nbytes"] // 4, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(dtype)

    config = ModelConfig.from_dict(manifest["model_config"])
    params = {}
    for name, shape in param_shapes(config).items():
        if name not in arrays or arrays[name].shape != shape:
            raise IntegrityError(f"tensor {name} missing or mis-shaped")
        params[name] = Tensor(arrays[name], requires_grad=requires_grad, name=name)
    model = EncoderModel(config, params)
    head = SpanHead(Tensor(arrays["head.weight"], requires_grad=requires_grad, name="head.weight"),
                    Tensor(arrays["head.bias"], requires_grad=requires_grad, name="head.bias"))

    plan = None
    pc = manifest.get("plan")
    if pc is not None:
        projections = {}
        identity = set(pc.get("identity_projections", []))
        for k in range(config.layers + 1):
            if k in identity:
                projections[k] = None
            else:
                projections[k] = Tensor(arrays[f"plan.proj.{k}"], requires_grad=requires_grad,
                                        name=f"plan.proj.{k}")
        plan = DistillPlan(list(pc["layer_map"]), projections, pc["w_task"], pc["w_layer"],
                           pc.get("w_hard", 0.0), pc["temperature"], pc.get("attention_target", "scores"))
    return Checkpoint(model, head, plan, manifest.get("metadata", {}), manifest)
