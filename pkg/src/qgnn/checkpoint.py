"""Single-file model checkpoints.

Layout: 8-byte magic, little-endian uint32 manifest length, UTF-8 JSON
manifest, then the concatenated raw array payloads.  Float arrays are
little-endian float32; integer payloads (lowered models) record their
dtype in the manifest.  The manifest carries the model topology, the
training config, quantizer states and the byte offset of every array.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .errors import ContractError

MAGIC = b"QGNNCKP1"


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or incompatible with its consumer."""


def write_blob(path, manifest: dict, arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr)
        dtype = raw.dtype.newbyteorder("<")
        raw = raw.astype(dtype, copy=False)
        buf = raw.tobytes()
        entries.append({
            "name": name,
            "shape": list(raw.shape),
            "dtype": raw.dtype.str,
            "offset": offset,
            "nbytes": len(buf),
        })
        payloads.append(buf)
        offset += len(buf)
    manifest = dict(manifest)
    manifest["arrays"] = entries
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for buf in payloads:
            fh.write(buf)


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in manifest["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, arrays


def save_model(path, model, config_dict: dict):
    """Serialize LayerParams + QuantModule states + TrainConfig."""
    arrays = {name: p.data for name, p in model.parameters()}
    sites = {}
    for name, qm in model.site_modules().items():
        sites[name] = {
            "state": qm.state(),
            "bits": qm.config.bits,
            "signed": qm.config.signed,
            "symmetric": qm.config.symmetric,
            "ste": qm.config.ste,
            "observer": qm.config.observer,
        }
    manifest = {
        "version": 1,
        "kind": "fake_quant",
        "arch": model.arch,
        "dims": list(model.dims),
        "heads": model.heads,
        "dropout_p": model.dropout_p,
        "task": "graph" if hasattr(model, "readout") else "node",
        "pool": getattr(model, "pool", None),
        "config": config_dict,
        "sites": sites,
    }
    write_blob(path, manifest, arrays)


def load_model(path):
    """Rebuild the model a checkpoint describes; returns (model, manifest)."""
    from .layers import GraphModel, NodeModel, QuantSpec

    manifest, arrays = read_blob(path)
    if manifest.get("kind") != "fake_quant":
        raise CheckpointError(f"not a trainable checkpoint: {manifest.get('kind')}")
    cfg = manifest["config"]
    spec = QuantSpec(
        enabled=cfg.get("regime", "fp32") != "fp32",
        bits=cfg.get("bits", 8),
        ste=cfg.get("ste", "vanilla"),
        observer=cfg.get("observer", "minmax"),
        momentum=cfg.get("momentum", 0.01),
        percentile=cfg.get("percentile", 0.001),
        site_bits=cfg.get("site_bits", {}) or {},
    )
    in_dim, hidden, out_dim = manifest["dims"]
    rng = np.random.default_rng(0)  # values are overwritten below
    if manifest["task"] == "graph":
        model = GraphModel(manifest["arch"], in_dim, hidden, out_dim, spec, rng,
                           heads=manifest["heads"],
                           dropout_p=manifest["dropout_p"],
                           pool=manifest["pool"] or "sum")
    else:
        model = NodeModel(manifest["arch"], in_dim, hidden, out_dim, spec, rng,
                          heads=manifest["heads"],
                          dropout_p=manifest["dropout_p"])
    params = dict(model.parameters())
    if set(params) != set(arrays):
        raise CheckpointError("parameter names do not match the checkpoint")
    for name, arr in arrays.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        params[name].data = arr.astype(np.float32)
    sites = model.site_modules()
    for name, entry in manifest["sites"].items():
        if name not in sites:
            raise CheckpointError(f"unknown quant site {name} in checkpoint")
        sites[name].load_state(entry["state"])
    return model, manifest
