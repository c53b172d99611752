"""Checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian payload of every tensor at the offset the header
records (relative to the start of the payload area).
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from app.errors import CheckpointError
from app.nn.shared import ParameterPartition

logger = logging.getLogger(__name__)

MAGIC = b"BOOTVIT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    step: int = 0
    epoch: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def partition_tensors(partition: ParameterPartition) -> Dict[str, np.ndarray]:
    """Canonical checkpoint names for every trainable tensor; shared tensors appear once."""
    out: Dict[str, np.ndarray] = {}
    for name, pair in partition.shared.items():
        out[f"shared.{name}"] = next(iter(pair.values())).data
    for network in ("vit", "agent"):
        for name, t in partition.private(network).items():
            out[f"{network}.{name}"] = t.data
    return out


def save_checkpoint(path: Union[str, Path], partition: ParameterPartition,
                    optimizer_state: Optional[Dict[str, np.ndarray]] = None, config: Optional[Dict[str, Any]] = None,
                    rng_state: Optional[Dict[str, Any]] = None, step: int = 0, epoch: int = 0,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    tensors = partition_tensors(partition)
    for key, value in (optimizer_state or {}).items():
        tensors[f"optim.{key}"] = value

    entries, payloads, offset = [], [], 0
    for name, array in tensors.items():
        little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
        blob = little.tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": little.dtype.str,
                        "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)

    header = {"format": FORMAT_VERSION, "tensors": entries, "config": config or {}, "rng": rng_state,
              "step": int(step), "epoch": int(epoch), "extra": extra or {}}
    raw = json.dumps(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in payloads:
            fh.write(blob)
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path} with {len(entries)} tensors at step {step}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")

    base = 16 + length
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"{path}: payload of '{entry['name']}' is truncated")
        dtype = np.dtype(entry["dtype"])
        array = np.frombuffer(blob[start:stop], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = array.astype(dtype.newbyteorder("="))
    return Checkpoint(tensors, header.get("config", {}), header.get("rng"), header.get("step", 0),
                      header.get("epoch", 0), header.get("extra", {}))


def restore_parameters(checkpoint: Checkpoint, partition: ParameterPartition) -> None:
    """Copy checkpoint values into the live arrays, keeping shared aliasing intact."""
    targets = partition_tensors(partition)
    missing = sorted(set(targets) - set(checkpoint.tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, first: {missing[0]}")
    for name, array in targets.items():
        stored = checkpoint.tensors[name]
        if stored.shape != array.shape:
            raise CheckpointError(f"'{name}' has shape {stored.shape} in the checkpoint, model needs {array.shape}")
        np.copyto(array, stored, casting="same_kind")
