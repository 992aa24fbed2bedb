"""
recsys/storage.py

On-disk formats shared by every trained artifact:

- MAT0 matrix files: magic b"MAT0", u32 LE rows, u32 LE cols, row-major LE float32
- manifests: key=value text ("manifest" file in each artifact directory)
- id lists: one id per line, UTF-8
- torch state: one MAT0 file per tensor, shapes recorded in the manifest
- pointer files replaced atomically (write temp + os.replace)
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import torch

from .config import read_keyvalue_file, write_keyvalue_file
from .errors import ConfigError, DataFormatError, SnapshotError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAT_MAGIC = b"MAT0"
_HEADER = struct.Struct("<4sII")
MANIFEST_NAME = "manifest"


def write_matrix(path: PathLike, matrix: np.ndarray) -> None:
    arr = np.asarray(matrix)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"MAT0 stores 2-d matrices, got shape {arr.shape}")
    rows, cols = arr.shape
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAT_MAGIC, rows, cols))
        fh.write(data.tobytes(order="C"))


def read_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SnapshotError(f"matrix file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError("truncated MAT0 header", path=str(path))
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAT_MAGIC!r}", path=str(path))
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise DataFormatError(
            f"MAT0 body has {len(raw) - _HEADER.size} bytes, expected {rows * cols * 4}",
            path=str(path))
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return arr.astype(np.float32)


def write_ids(path: PathLike, ids: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in ids:
            if "\n" in i or "\t" in i:
                raise ValueError(f"id contains a separator: {i!r}")
            fh.write(f"{i}\n")


def read_ids(path: PathLike) -> Tuple[str, ...]:
    path = Path(path)
    if not path.exists():
        raise SnapshotError(f"id file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return tuple(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def write_manifest(directory: PathLike, values: Mapping[str, object]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    write_keyvalue_file(path, values)
    return path


def read_manifest(directory: PathLike) -> Dict[str, str]:
    path = Path(directory) / MANIFEST_NAME
    try:
        return read_keyvalue_file(path)
    except ConfigError as e:
        raise SnapshotError(str(e)) from e


def expect_kind(manifest: Mapping[str, str], kind: str, directory: PathLike) -> None:
    found = manifest.get("kind")
    if found != kind:
        raise SnapshotError(f"{directory}: expected artifact kind {kind!r}, found {found!r}")


# -------------------------
# torch state persistence
# -------------------------
def save_state(directory: PathLike, state: Mapping[str, torch.Tensor],
               meta: Mapping[str, object]) -> None:
    """
    Persist a module state_dict: manifest with meta + tensor shapes, one MAT0 per tensor.
    Tensors of rank != 2 are stored as (shape[0], prod(rest)); scalars as 1x1.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, object] = dict(meta)
    names: List[str] = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().double().numpy()
        shape = arr.shape
        if arr.ndim == 0:
            flat = arr.reshape(1, 1)
        elif arr.ndim == 1:
            flat = arr.reshape(1, -1)
        else:
            flat = arr.reshape(shape[0], -1)
        write_matrix(directory / f"{name}.mat", flat)
        entries[f"tensor.{name}"] = "x".join(str(s) for s in shape) if shape else "scalar"
        names.append(name)
    entries["tensors"] = ",".join(names)
    write_manifest(directory, entries)


def load_state(directory: PathLike) -> Tuple[Dict[str, str], Dict[str, torch.Tensor]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    state: Dict[str, torch.Tensor] = {}
    for name in filter(None, manifest.get("tensors", "").split(",")):
        shape_text = manifest.get(f"tensor.{name}")
        if shape_text is None:
            raise SnapshotError(f"{directory}: manifest lacks shape for tensor {name!r}")
        arr = read_matrix(directory / f"{name}.mat")
        shape: Tuple[int, ...] = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
        state[name] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    return manifest, state


def parse_int_list(raw: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def format_int_list(values: Sequence[int]) -> str:
    return ",".join(str(int(v)) for v in values)


# -------------------------
# atomic pointer + digests
# -------------------------
def atomic_write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def file_digest(path: PathLike, h=None):
    h = h or hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h


def digest_of(*parts: Union[str, Path, bytes]) -> str:
    """sha256 over a mix of files (Path) and literal strings/bytes, in order."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, Path):
            h.update(b"file:")
            file_digest(part, h)
        elif isinstance(part, bytes):
            h.update(part)
        else:
            h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()
