"""Single-file checkpoint container.

Layout: ``FMUG`` magic, format version, a JSON header with the model
config hash, step counter and segment table, then the segment payloads,
then a trailing sha256 over everything before it.  All multi-byte
integers are little-endian and model weights are stored as little-endian
float32, so files are portable and byte-stable: saving, loading and
saving again produces an identical file.

Each segment holds one "tensor tree": an arbitrary nesting of dicts,
lists, scalars and tensors (enough to hold a module state dict, an
optimizer state dict, or an RNG state bundle).  The tree skeleton is
JSON with tensors swapped out for indices into a flat tensor block.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .config import Config
from .errors import (
    CheckpointConfigMismatchError,
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
)

MAGIC = b"FMUG"
FORMAT_VERSION = 1
_DIGEST_LEN = 32

# Segment names for the eight trainable parts, mapped to FacemugModel
# attribute names.  Checkpoints may hold any subset plus "opt.*" / "rng".
MODULE_SEGMENTS = {
    "mapping_net": "mapping",
    "style_encoder": "style_encoder",
    "warp_net": "warp",
    "aggregation": "aggregation",
    "refine_encoder": "refine_encoder",
    "refine_decoder": "refine_decoder",
    "feature_bank": "bank",
    "discriminator": "discriminator",
}

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.int32: 4,
    torch.bool: 5,
    torch.float16: 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {
    0: "<f4",
    1: "<f8",
    2: "<i8",
    3: "|u1",
    4: "<i4",
    5: "|b1",
    6: "<f2",
}


def _encode_tree(node: Any, tensors: list[torch.Tensor]) -> Any:
    if isinstance(node, torch.Tensor):
        tensors.append(node)
        return ["t", len(tensors) - 1]
    if isinstance(node, dict):
        items = []
        for k, v in node.items():
            if isinstance(k, bool) or not isinstance(k, (str, int)):
                raise CheckpointError(f"unsupported dict key type {type(k).__name__!r}")
            key = ["s", k] if isinstance(k, str) else ["i", k]
            items.append([key, _encode_tree(v, tensors)])
        return ["d", items]
    if isinstance(node, (list, tuple)):
        return ["l", [_encode_tree(v, tensors) for v in node]]
    if node is None or isinstance(node, (bool, int, float, str)):
        return ["v", node]
    raise CheckpointError(f"unsupported value type {type(node).__name__!r}")


def _decode_tree(node: Any, tensors: list[torch.Tensor]) -> Any:
    tag, payload = node
    if tag == "t":
        return tensors[payload]
    if tag == "d":
        out: dict[Any, Any] = {}
        for key, value in payload:
            out[key[1]] = _decode_tree(value, tensors)
        return out
    if tag == "l":
        return [_decode_tree(v, tensors) for v in payload]
    if tag == "v":
        return payload
    raise CheckpointIntegrityError(f"unknown tree tag {tag!r}")


def _pack_segment(tree: Any) -> bytes:
    tensors: list[torch.Tensor] = []
    skeleton = json.dumps(_encode_tree(tree, tensors), separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(skeleton)), skeleton, struct.pack("<I", len(tensors))]
    for t in tensors:
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
        code = _DTYPE_CODES[t.dtype]
        arr = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[code], copy=False)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_segment(buf: bytes) -> Any:
    try:
        (skel_len,) = struct.unpack_from("<I", buf, 0)
        skeleton = json.loads(buf[4 : 4 + skel_len].decode("utf-8"))
        pos = 4 + skel_len
        (n_tensors,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: list[torch.Tensor] = []
        for _ in range(n_tensors):
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            arr = np.frombuffer(buf, dtype=_NP_DTYPES[code], count=int(np.prod(shape, dtype=np.int64)) if ndim else 1, offset=pos)
            pos += arr.nbytes
            tensors.append(torch.from_numpy(arr.reshape(shape).copy()).to(_CODE_DTYPES[code]))
        if pos != len(buf):
            raise CheckpointIntegrityError("segment has trailing bytes")
        return _decode_tree(skeleton, tensors)
    except (struct.error, ValueError, KeyError, IndexError) as exc:
        raise CheckpointIntegrityError(f"malformed segment: {exc}") from exc


@dataclass
class Checkpoint:
    """In-memory view of one checkpoint file."""

    config: Config
    step: int
    segments: dict[str, Any]

    def require(self, name: str) -> Any:
        if name not in self.segments:
            raise CheckpointIntegrityError(f"checkpoint is missing segment {name!r}")
        return self.segments[name]


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike[str]) -> None:
    """Write atomically; the resulting bytes depend only on the contents."""
    payloads: list[tuple[str, bytes]] = [("config", _pack_segment({"config_json": ckpt.config.to_json()}))]
    for name, tree in ckpt.segments.items():
        if name == "config":
            raise CheckpointError("segment name 'config' is reserved")
        payloads.append((name, _pack_segment(tree)))

    table = []
    offset = 0
    for name, blob in payloads:
        table.append({"name": name, "offset": offset, "length": len(blob)})
        offset += len(blob)
    header = json.dumps(
        {"config_hash": ckpt.config.model_hash(), "step": int(ckpt.step), "segments": table},
        separators=(",", ":"),
    ).encode("utf-8")

    body = b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header] + [b for _, b in payloads])
    digest = hashlib.sha256(body).digest()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    os.replace(tmp, os.fspath(path))


def load_checkpoint(path: str | os.PathLike[str], expected_config: Config | None = None) -> Checkpoint:
    """Read and verify a checkpoint file.

    Raises CheckpointIntegrityError for truncated or bit-flipped files,
    CheckpointVersionError for an unknown format version, and
    CheckpointConfigMismatchError when expected_config hashes differently
    from the config the file was written with.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 + _DIGEST_LEN:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic, not a checkpoint file")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, file is corrupt or truncated")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
        base = 12 + header_len
        segments: dict[str, Any] = {}
        for row in header["segments"]:
            blob = body[base + row["offset"] : base + row["offset"] + row["length"]]
            if len(blob) != row["length"]:
                raise CheckpointIntegrityError(f"{path}: segment {row['name']!r} extends past end of file")
            segments[row["name"]] = _unpack_segment(blob)
        config = Config.from_json(segments.pop("config")["config_json"])
        step = int(header["step"])
        stored_hash = header["config_hash"]
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, struct.error) as exc:
        raise CheckpointIntegrityError(f"{path}: malformed header: {exc}") from exc
    if config.model_hash() != stored_hash:
        raise CheckpointIntegrityError(f"{path}: header config hash disagrees with stored config")
    if expected_config is not None and expected_config.model_hash() != stored_hash:
        raise CheckpointConfigMismatchError(
            f"{path}: checkpoint was written for a different model config "
            f"(stored hash {stored_hash[:12]}, requested {expected_config.model_hash()[:12]}); "
            "refusing to load"
        )
    return Checkpoint(config=config, step=step, segments=segments)


def _clone_tree(node):
    # captures must not alias live tensors: the optimizer mutates parameters
    # in place, which would silently rewrite an in-memory snapshot
    if isinstance(node, torch.Tensor):
        return node.detach().clone()
    if isinstance(node, dict):
        return {k: _clone_tree(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return type(node)(_clone_tree(v) for v in node)
    return node


def capture_rng() -> dict[str, Any]:
    return {"torch": torch.get_rng_state()}


def restore_rng(state: dict[str, Any]) -> None:
    torch.set_rng_state(state["torch"].to(torch.uint8))


def capture_model(
    model: torch.nn.Module,
    step: int,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    extra_rng: dict[str, Any] | None = None,
) -> Checkpoint:
    """Snapshot a FacemugModel plus optimizer and RNG state."""
    segments: dict[str, Any] = {}
    for seg_name, attr in MODULE_SEGMENTS.items():
        state = getattr(model, attr).state_dict()
        for key, value in state.items():
            if value.dtype != torch.float32:
                raise CheckpointError(f"{seg_name}.{key}: expected float32 weights, got {value.dtype}")
        segments[seg_name] = _clone_tree(dict(state))
    for name, opt in (optimizers or {}).items():
        segments[f"opt.{name}"] = _clone_tree(opt.state_dict())
    rng = capture_rng()
    if extra_rng:
        rng.update(_clone_tree(extra_rng))
    segments["rng"] = rng
    return Checkpoint(config=model.config, step=step, segments=segments)


def restore_model(
    model: torch.nn.Module,
    ckpt: Checkpoint,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    restore_rng_state: bool = True,
) -> int:
    """Load a checkpoint back into a model; returns the stored step."""
    if model.config.model_hash() != ckpt.config.model_hash():
        raise CheckpointConfigMismatchError("model config does not match checkpoint config")
    for seg_name, attr in MODULE_SEGMENTS.items():
        getattr(model, attr).load_state_dict(ckpt.require(seg_name), strict=True)
    for name, opt in (optimizers or {}).items():
        opt.load_state_dict(ckpt.require(f"opt.{name}"))
    if restore_rng_state and "rng" in ckpt.segments:
        restore_rng(ckpt.segments["rng"])
    return ckpt.step
