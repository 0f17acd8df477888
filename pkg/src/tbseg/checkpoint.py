"""Deterministic checkpoint archives.

A checkpoint is a zip file with stored (uncompressed) entries, fixed
timestamps and sorted entry order, so saving the same state twice — or
save / load / save — produces byte-identical files. Contents:

- ``manifest.json``   canonical JSON: format version, model config + digest,
                      free-form counters, stage plan, numpy RNG state
- ``params/*.npy``    model parameters by dotted name
- ``buffers/*.npy``   BN running stats and friends
- ``momentum/*.npy``  SGD momentum buffers
- ``rng/torch.npy``   torch global RNG state (uint8 vector)

Loading refuses archives whose model config digest does not match the
config they claim, and ``restore_model`` refuses weights for a model built
from a different config.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, DataError
from .network import ModelConfig

FORMAT_VERSION = 1

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # note: asarray(order="C") rather than ascontiguousarray — the latter
    # promotes 0-dim arrays (e.g. BN num_batches_tracked) to 1-dim
    np.lib.format.write_array(buf, np.asarray(array, order="C"), allow_pickle=False)
    return buf.getvalue()


def _read_npy(data: bytes) -> np.ndarray:
    return np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)


@dataclass
class CheckpointData:
    model_config: ModelConfig
    params: dict
    buffers: dict
    momentum: dict
    counters: dict
    stage_plan: dict | None = None
    numpy_rng_state: dict | None = None
    torch_rng_state: np.ndarray | None = None


def save_checkpoint(path, data: CheckpointData) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": data.model_config.to_dict(),
        "model_config_digest": data.model_config.digest(),
        "counters": data.counters,
        "stage_plan": data.stage_plan,
        "numpy_rng_state": data.numpy_rng_state,
    }
    entries = {"manifest.json": json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()}
    for group, tensors in (("params", data.params), ("buffers", data.buffers),
                           ("momentum", data.momentum)):
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            entries[f"{group}/{name}.npy"] = _npy_bytes(arr)
    if data.torch_rng_state is not None:
        entries["rng/torch.npy"] = _npy_bytes(np.asarray(data.torch_rng_state, dtype=np.uint8))

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint does not exist: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "manifest.json" not in names:
                raise DataError(f"not a checkpoint archive (no manifest.json): {path}")
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise DataError(
                    f"unsupported checkpoint format version {manifest.get('format_version')!r} "
                    f"(expected {FORMAT_VERSION})"
                )
            config = ModelConfig.from_dict(manifest["model_config"])
            if config.digest() != manifest.get("model_config_digest"):
                raise DataError(f"checkpoint manifest digest mismatch in {path}")

            groups = {"params": {}, "buffers": {}, "momentum": {}}
            for entry in names:
                for group in groups:
                    prefix = group + "/"
                    if entry.startswith(prefix) and entry.endswith(".npy"):
                        key = entry[len(prefix):-len(".npy")]
                        groups[group][key] = _read_npy(zf.read(entry))
            torch_state = _read_npy(zf.read("rng/torch.npy")) if "rng/torch.npy" in names else None
    except zipfile.BadZipFile as exc:
        raise DataError(f"corrupt checkpoint archive {path}: {exc}") from exc

    return CheckpointData(
        model_config=config,
        params=groups["params"],
        buffers=groups["buffers"],
        momentum=groups["momentum"],
        counters=manifest.get("counters", {}),
        stage_plan=manifest.get("stage_plan"),
        numpy_rng_state=manifest.get("numpy_rng_state"),
        torch_rng_state=torch_state,
    )


def model_state(model: torch.nn.Module) -> tuple[dict, dict]:
    """(params, buffers) as name -> tensor dicts, in registration order."""
    params = {name: p for name, p in model.named_parameters()}
    buffers = {name: b for name, b in model.named_buffers() if "relative_position_index" not in name}
    return params, buffers


def restore_model(model, ckpt: CheckpointData) -> None:
    """Copy checkpoint weights into a model built from the same config."""
    if model.config.digest() != ckpt.model_config.digest():
        raise ConfigurationError(
            "checkpoint was written for a different model configuration "
            f"(digest {ckpt.model_config.digest()[:12]}… vs model {model.config.digest()[:12]}…)"
        )
    params, buffers = model_state(model)
    for store, live, kind in ((ckpt.params, params, "parameter"),
                              (ckpt.buffers, buffers, "buffer")):
        missing = set(live) - set(store)
        extra = set(store) - set(live)
        if missing or extra:
            raise DataError(
                f"checkpoint {kind} names do not match the model "
                f"(missing: {sorted(missing)[:3]}, unexpected: {sorted(extra)[:3]})"
            )
        for name, arr in store.items():
            tensor = live[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise DataError(
                    f"{kind} {name}: checkpoint shape {tuple(arr.shape)} "
                    f"!= model shape {tuple(tensor.shape)}"
                )
            with torch.no_grad():
                tensor.copy_(torch.from_numpy(np.asarray(arr, order="C")))
