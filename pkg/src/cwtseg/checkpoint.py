"""Binary checkpoint container.

Layout: magic "CWT1", u32 format version, u64 manifest byte length, the
manifest (JSON, UTF-8), then the payload of concatenated little-endian
arrays. The manifest names every entry with shape, dtype, byte offset,
length, frozen flag, and a sha256 content hash that is verified on load;
it also carries the run's resolved config fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adaptation import CWTParams
from .backbone import BackboneParams
from .errors import CheckpointError
from .tensor import Tensor

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "hash_tensors",
    "save_backbone",
    "load_backbone",
    "save_cwt",
    "load_cwt",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"CWT1"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def _le_bytes(arr: np.ndarray) -> tuple[bytes, str]:
    dtype = np.dtype("<f8") if arr.dtype == np.float64 else np.dtype("<f4")
    if arr.dtype not in (np.float64, np.float32):
        raise CheckpointError(f"unsupported dtype {arr.dtype} (use f32 or f64)")
    return np.ascontiguousarray(arr, dtype=dtype).tobytes(), dtype.str


def save_checkpoint(path: str | Path, entries: Sequence[tuple[str, Tensor]],
                    config: Mapping | None = None,
                    meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    payload = bytearray()
    for name, t in entries:
        raw, dtype_str = _le_bytes(t.data)
        manifest_entries.append({
            "name": name,
            "shape": list(t.data.shape),
            "dtype": dtype_str,
            "offset": len(payload),
            "nbytes": len(raw),
            "frozen": bool(t.frozen),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payload.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "entries": manifest_entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(bytes(payload))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Entries as Tensors with frozen flags restored, plus the manifest.

    Every entry's payload hash is verified; corruption raises."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (manifest_len,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + manifest_len].decode("utf-8"))
    payload = raw[16 + manifest_len:]
    tensors: dict[str, Tensor] = {}
    for e in manifest["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if hashlib.sha256(chunk).hexdigest() != e["sha256"]:
            raise CheckpointError(f"payload hash mismatch for entry {e['name']!r}")
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"unknown dtype {e['dtype']!r} for entry {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        t = Tensor(arr, requires_grad=not e["frozen"])
        t.frozen = e["frozen"]
        tensors[e["name"]] = t
    return tensors, manifest


def hash_tensors(tensors: Iterable[Tensor]) -> str:
    """Order-sensitive content hash of a parameter collection."""
    h = hashlib.sha256()
    for t in tensors:
        raw, dtype_str = _le_bytes(t.data)
        h.update(dtype_str.encode())
        h.update(np.array(t.data.shape, dtype="<i8").tobytes())
        h.update(raw)
    return h.hexdigest()


# -- model-level helpers ---------------------------------------------------------

def save_backbone(path: str | Path, params: BackboneParams,
                  config: Mapping | None = None) -> Path:
    entries = []
    for i, (w, b) in enumerate(params.layers):
        entries.append((f"layer{i}.w", w))
        entries.append((f"layer{i}.b", b))
    meta = {
        "kind": "backbone",
        "feature_dim": params.feature_dim,
        "input_channels": params.input_channels,
        "num_layers": len(params.layers),
        "frozen": params.frozen,
        "content_hash": hash_tensors(params.tensors()),
    }
    return save_checkpoint(path, entries, config=config, meta=meta)


def load_backbone(path: str | Path) -> tuple[BackboneParams, dict]:
    tensors, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    layers = []
    for i in range(meta["num_layers"]):
        try:
            layers.append((tensors[f"layer{i}.w"], tensors[f"layer{i}.b"]))
        except KeyError as err:
            raise CheckpointError(f"backbone checkpoint missing entry {err}") from err
    params = BackboneParams(layers=layers, feature_dim=meta["feature_dim"],
                            input_channels=meta["input_channels"])
    return params, manifest


def save_cwt(path: str | Path, params: CWTParams,
             config: Mapping | None = None,
             backbone_hash: str | None = None) -> Path:
    entries = [("wq", params.wq)]
    if not params.shared_qkv:
        entries += [("wk", params.wk), ("wv", params.wv)]
    entries += [("psi_w", params.psi_w), ("psi_b", params.psi_b),
                ("ln_gamma", params.ln_gamma), ("ln_beta", params.ln_beta)]
    meta = {
        "kind": "cwt",
        "num_heads": params.num_heads,
        "dropout_rate": params.dropout_rate,
        "use_layer_norm": params.use_layer_norm,
        "shared_qkv": params.shared_qkv,
        "scale_mode": params.scale_mode,
        "content_hash": hash_tensors(params.tensors()),
    }
    if backbone_hash is not None:
        meta["backbone_hash"] = backbone_hash
    return save_checkpoint(path, entries, config=config, meta=meta)


def load_cwt(path: str | Path) -> tuple[CWTParams, dict]:
    tensors, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    if meta.get("kind") != "cwt":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    try:
        wq = tensors["wq"]
        wk = wq if meta["shared_qkv"] else tensors["wk"]
        wv = wq if meta["shared_qkv"] else tensors["wv"]
        params = CWTParams(wq=wq, wk=wk, wv=wv,
                           psi_w=tensors["psi_w"], psi_b=tensors["psi_b"],
                           ln_gamma=tensors["ln_gamma"], ln_beta=tensors["ln_beta"],
                           num_heads=meta["num_heads"],
                           dropout_rate=meta["dropout_rate"],
                           use_layer_norm=meta["use_layer_norm"],
                           shared_qkv=meta["shared_qkv"],
                           scale_mode=meta["scale_mode"])
    except KeyError as err:
        raise CheckpointError(f"adapter checkpoint missing entry {err}") from err
    return params, manifest
