"""Versioned checkpoint container: JSON header plus raw little-endian tensors.

Layout: 4-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the concatenated tensor payload. The header records dtype/shape/offset
per tensor and a CRC32 of the payload, so truncation and corruption are
detected before any state is returned. Saving after loading an unchanged
checkpoint is byte-stable (tensors are laid out in sorted-name order).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

MAGIC = b"AEOD"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    stage: int
    epoch: int
    tensors: dict[str, Tensor]
    rng_state: bytes = b""

    def weight_fingerprint(self, prefix: str = "") -> int:
        """CRC of every tensor under the prefix; bit-level change detector."""
        crc = 0
        for name in sorted(self.tensors):
            if name.startswith(prefix):
                crc = zlib.crc32(self.tensors[name].detach().cpu().numpy().tobytes(), crc)
        return crc


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name].detach().cpu().numpy()
        data = arr.tobytes()
        entries[name] = {
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        }
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state.hex(),
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint file: {path}")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + header_len:
        raise CorruptCheckpointError(f"truncated header: {path}")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {path}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format {version} not supported (expected {FORMAT_VERSION})")
    payload = data[12 + header_len:]
    if len(payload) != header["payload_nbytes"]:
        raise CorruptCheckpointError(
            f"truncated payload: has {len(payload)} bytes, header says {header['payload_nbytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptCheckpointError(f"payload checksum mismatch: {path}")
    tensors = {}
    for name, meta in header["tensors"].items():
        start, nbytes = meta["offset"], meta["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(meta["dtype"]))
        tensors[name] = torch.from_numpy(arr.reshape(meta["shape"]).copy())
    return Checkpoint(
        config=header["config"],
        stage=header["stage"],
        epoch=header["epoch"],
        tensors=tensors,
        rng_state=bytes.fromhex(header["rng_state"]),
    )


def collect_state(**named_modules: torch.nn.Module) -> dict[str, Tensor]:
    """Flatten module state dicts under their given name prefixes."""
    out = {}
    for prefix, module in named_modules.items():
        if module is None:
            continue
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value.detach().clone()
    return out


def restore_state(tensors: dict[str, Tensor], **named_modules: torch.nn.Module) -> None:
    """Load the prefixed flat tensors back into their modules (strict)."""
    for prefix, module in named_modules.items():
        if module is None:
            continue
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items()
                 if k.startswith(prefix + ".")}
        module.load_state_dict(state, strict=True)
