"""On-disk checkpoint format.

A checkpoint is a directory holding two files:

  manifest.json   format version, stage, step, the config snapshot, and a
                  tensor directory: ordered entries of name, shape, byte
                  offset, and byte length
  tensors.bin     the named tensors as little-endian 32-bit floats,
                  concatenated in manifest order

Offsets and lengths tile the blob exactly, and save -> load -> save
reproduces both files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import stage2 as stage2_mod
from .adapters import AdapterSet, LoraAdapter
from .autodiff import Tensor
from .config import RunConfig, run_config_from_snapshot
from .errors import CheckpointError
from .model import ToyDepthModel, build_model
from .stage2 import Stage2State
from .subspaces import classify_layers

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1


def save_checkpoint(path, model: ToyDepthModel, stage: int, step: int,
                    config_snapshot: dict,
                    adapter_set: Optional[AdapterSet] = None,
                    stage2_states: Optional[dict] = None) -> Path:
    """Write manifest plus blob; returns the checkpoint directory."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray]] = []
    for name, weight in model.weights.items():
        entries.append((f"model/{name}", weight.data))
    adapters_meta = None
    if adapter_set is not None and len(adapter_set):
        adapters_meta = {"rank": adapter_set.rank, "init_seed": adapter_set.init_seed,
                         "layers": list(adapter_set.adapters)}
        for layer_id, adapter in adapter_set.adapters.items():
            entries.append((f"adapter/{layer_id}/B", adapter.B.data))
            entries.append((f"adapter/{layer_id}/A", adapter.A.data))
    stage2_meta = None
    if stage2_states:
        first = next(iter(stage2_states.values()))
        stage2_meta = {"rank": int(first.projector.shape[1]),
                       "refresh_period": first.refresh_period,
                       "step_counter": first.step_counter,
                       "layers": list(stage2_states)}
        for layer_id, state in stage2_states.items():
            entries.append((f"stage2/{layer_id}/alpha", state.alpha.data))
            entries.append((f"stage2/{layer_id}/beta", state.beta.data))
            entries.append((f"stage2/{layer_id}/projector", state.projector))
            entries.append((f"stage2/{layer_id}/accumulator", state.accumulator))
            entries.append((f"stage2/{layer_id}/second_moment", state.second_moment))

    blob = bytearray()
    directory = []
    for name, arr in entries:
        raw = np.ascontiguousarray(arr).astype("<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": len(blob), "nbytes": len(raw)})
        blob.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "step": step,
        "config": config_snapshot,
        "adapters": adapters_meta,
        "stage2": stage2_meta,
        "tensors": directory,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    (out / BLOB_NAME).write_bytes(bytes(blob))
    return out


@dataclass
class LoadedCheckpoint:
    model: ToyDepthModel
    adapter_set: Optional[AdapterSet]
    stage2_states: Optional[dict]
    stage: int
    step: int
    config: RunConfig
    snapshot: dict


def _read_manifest(root: Path) -> dict:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"{root}: missing {MANIFEST_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{root}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{root}: unsupported format_version "
                              f"{manifest.get('format_version')!r} (expected {FORMAT_VERSION})")
    for key in ("stage", "step", "config", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"{root}: manifest is missing key {key!r}")
    return manifest


def _read_tensors(root: Path, manifest: dict) -> dict:
    blob_path = root / BLOB_NAME
    if not blob_path.exists():
        raise CheckpointError(f"{root}: missing {BLOB_NAME}")
    blob = blob_path.read_bytes()
    tensors = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if offset != expected_offset:
            raise CheckpointError(f"{root}: tensor {name!r} offset {offset} does not tile "
                                  f"the blob (expected {expected_offset})")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != 4 * count:
            raise CheckpointError(f"{root}: tensor {name!r} length {nbytes} does not match "
                                  f"shape {shape}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{root}: tensor {name!r} extends past the blob "
                                  f"({offset + nbytes} > {len(blob)})")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                      offset=offset).reshape(shape)
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise CheckpointError(f"{root}: blob has {len(blob) - expected_offset} trailing bytes "
                              "not covered by the manifest")
    return tensors


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild the model (and adapters or stage-2 states) from disk."""
    root = Path(path)
    manifest = _read_manifest(root)
    tensors = _read_tensors(root, manifest)
    cfg = run_config_from_snapshot(manifest["config"])
    model = build_model(cfg.model)
    dtype = cfg.model.np_dtype
    for name, weight in model.weights.items():
        key = f"model/{name}"
        if key not in tensors:
            raise CheckpointError(f"{root}: manifest has no tensor {key!r}")
        weight.assign_(tensors[key].astype(dtype))

    adapter_set = None
    adapters_meta = manifest.get("adapters")
    if adapters_meta:
        registry = classify_layers(model)
        adapter_set = AdapterSet(registry, int(adapters_meta["rank"]),
                                 int(adapters_meta["init_seed"]))
        for layer_id in adapters_meta["layers"]:
            b_key, a_key = f"adapter/{layer_id}/B", f"adapter/{layer_id}/A"
            if b_key not in tensors or a_key not in tensors:
                raise CheckpointError(f"{root}: adapter tensors for {layer_id!r} are missing")
            adapter_set.adapters[layer_id] = LoraAdapter(
                layer_id, int(adapters_meta["rank"]),
                B=Tensor(tensors[b_key].astype(dtype), requires_grad=True,
                         name=f"adapter/{layer_id}/B"),
                A=Tensor(tensors[a_key].astype(dtype), requires_grad=True,
                         name=f"adapter/{layer_id}/A"))
        model.install_adapters(adapter_set)

    stage2_states = None
    stage2_meta = manifest.get("stage2")
    if stage2_meta:
        stage2_states = {}
        for layer_id in stage2_meta["layers"]:
            keys = {part: f"stage2/{layer_id}/{part}" for part in
                    ("alpha", "beta", "projector", "accumulator", "second_moment")}
            for key in keys.values():
                if key not in tensors:
                    raise CheckpointError(f"{root}: stage-2 tensor {key!r} is missing")
            state = Stage2State(
                layer_id=layer_id,
                alpha=Tensor(tensors[keys["alpha"]].astype(dtype), requires_grad=True,
                             name=f"stage2/{layer_id}/alpha"),
                beta=Tensor(tensors[keys["beta"]].astype(dtype), requires_grad=True,
                            name=f"stage2/{layer_id}/beta"),
                projector=tensors[keys["projector"]].astype(np.float64),
                accumulator=tensors[keys["accumulator"]].astype(np.float64),
                second_moment=tensors[keys["second_moment"]].astype(np.float64),
                refresh_period=int(stage2_meta["refresh_period"]),
                step_counter=int(stage2_meta["step_counter"]),
                direction=np.zeros((model.weights[layer_id].shape), dtype=dtype),
            )
            state.direction = stage2_mod.composed_direction(state, cfg.stage2.lr)
            stage2_states[layer_id] = state
        model.install_stage2(stage2_states)

    return LoadedCheckpoint(model, adapter_set, stage2_states,
                            int(manifest["stage"]), int(manifest["step"]),
                            cfg, manifest["config"])
