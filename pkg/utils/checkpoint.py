"""Binary parameter checkpoints.

    [offset] [type]           [description]
    0000     8 bytes          magic b"FLSIMCK\\0"
    0008     u32 LE           format version
    0012     8 bytes          kind tag, ASCII, NUL-padded ("global", "gen")
    0020     u64 LE           dimension d
    0028     d × f64 LE       parameters
"""

from pathlib import Path
import struct
from typing import Literal, Tuple, get_args

import jax
import jax.numpy as jnp
import numpy as np

from ._constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION

CheckpointKind = Literal["global", "gen"]

_HEADER = struct.Struct("<8sI8sQ")


class CheckpointError(ValueError):
    def __init__(self, path: str | Path, detail: str) -> None:
        super().__init__("bad checkpoint '{}': {}".format(path, detail))
        self.path = Path(path)


def save_checkpoint(path: str | Path, kind: CheckpointKind, params: jax.Array) -> None:
    if kind not in get_args(CheckpointKind):
        raise ValueError("unknown checkpoint kind '{}'".format(kind))
    vec = np.asarray(params, dtype="<f8")
    if vec.ndim != 1:
        raise ValueError("checkpoints store flat parameter vectors, got shape {}".format(vec.shape))
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind.encode("ascii"), vec.shape[0]))
        f.write(vec.tobytes())


def load_checkpoint(path: str | Path, kind: CheckpointKind | None=None) -> Tuple[CheckpointKind, jax.Array]:
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < _HEADER.size:
        raise CheckpointError(path, "truncated header ({} bytes)".format(len(payload)))
    magic, version, tag, dim = _HEADER.unpack(payload[:_HEADER.size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(path, "wrong magic {!r}".format(magic))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(path, "unsupported version {}".format(version))
    found = tag.rstrip(b"\x00").decode("ascii", errors="replace")
    if found not in get_args(CheckpointKind):
        raise CheckpointError(path, "unknown kind tag '{}'".format(found))
    if kind is not None and found != kind:
        raise CheckpointError(path, "expected a '{}' checkpoint, found '{}'".format(kind, found))
    body = payload[_HEADER.size:]
    if len(body) != 8 * dim:
        raise CheckpointError(path, "expected {} parameter bytes, got {}".format(8 * dim, len(body)))
    return found, jnp.asarray(np.frombuffer(body, dtype="<f8"), dtype=jnp.float64)
