"""Checkpoint container.

Layout (little-endian)::

    b"SKCK" | u32 header_len | header JSON (UTF-8) | float32 payload

The header holds ``config`` (free-form echo), ``step``, ``seed`` and
``table``: a list of ``{"name", "shape", "offset"}`` where ``offset``
counts float32 elements from the start of the payload.  Head parameters
are stored under the ``sfhead/`` prefix; a checkpoint without them is a
backbone-only checkpoint.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Module

MAGIC = b"SKCK"
HEAD_PREFIX = "sfhead/"

__all__ = ["save_checkpoint", "read_checkpoint", "apply_state", "CheckpointError", "HEAD_PREFIX"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    model: Module,
    head: Module | None,
    config: dict,
    step: int,
    seed: int,
) -> None:
    state = dict(model.state_dict())
    if head is not None:
        state.update({HEAD_PREFIX + k: v for k, v in head.state_dict().items()})
    table, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": config, "step": step, "seed": seed, "table": table}).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=8 + hlen)
    state = {}
    for entry in header["table"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + n > payload.size:
            raise CheckpointError(f"payload truncated at {entry['name']}")
        state[entry["name"]] = payload[start : start + n].reshape(entry["shape"]).copy()
    return header, state


def apply_state(model: Module, head: Module | None, state: dict[str, np.ndarray]) -> None:
    """Load ``state`` into ``model`` (and ``head`` when given).

    Raises on any missing, unexpected or mis-shaped entry.  Head entries
    are ignored only when ``head`` is None.
    """
    main = {k: v for k, v in state.items() if not k.startswith(HEAD_PREFIX)}
    heads = {k[len(HEAD_PREFIX) :]: v for k, v in state.items() if k.startswith(HEAD_PREFIX)}
    try:
        model.load_state_dict(main)
        if head is not None:
            head.load_state_dict(heads)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
