"""Binary tensor container

Layout: 8-byte magic, 4-byte little-endian header length, a JSON header, then the
raw little-endian float32/float64 payload of every tensor back to back. Offsets in
the header are relative to the first payload byte.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple
import json
import struct

import numpy as np

from necroseg.core import PathLike
from necroseg.exceptions import TensorFileError

MAGIC = b"NSEGTNSR"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class TensorEntry:
    """Header record of one stored tensor"""

    name: str
    shape: Tuple[int, ...]
    dtype: str
    offset: int
    frozen: bool = False
    adapter: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "offset": self.offset,
            "frozen": self.frozen,
            "adapter": self.adapter,
        }

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * _DTYPES[self.dtype].itemsize


@dataclass
class TensorFile:
    tensors: Dict[str, np.ndarray]
    entries: Dict[str, TensorEntry]
    meta: dict = field(default_factory=dict)


def _dtype_name(array: np.ndarray) -> str:
    if array.dtype == np.float64:
        return "float64"
    if array.dtype == np.float32:
        return "float32"
    raise TensorFileError(f"Unsupported element type {array.dtype}, expected float32 or float64")


def write_tensors(
    path: PathLike,
    tensors: Mapping[str, np.ndarray],
    meta: Optional[dict] = None,
    frozen: Optional[Mapping[str, bool]] = None,
    adapters: Optional[Mapping[str, str]] = None,
) -> None:
    """Write named arrays into a tensor container

    Args:
        path (PathLike): output file
        tensors (Mapping[str, np.ndarray]): arrays in storage order
        meta (dict): free-form JSON metadata stored in the header
        frozen (Mapping[str, bool]): frozen flag per tensor name
        adapters (Mapping[str, str]): name of the base matrix each adapter tensor is attached to
    """
    frozen = frozen or {}
    adapters = adapters or {}
    entries = []
    payload = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = _dtype_name(array)
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            TensorEntry(
                name=name,
                shape=tuple(int(s) for s in array.shape),
                dtype=dtype,
                offset=offset,
                frozen=bool(frozen.get(name, False)),
                adapter=adapters.get(name),
            )
        )
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"meta": meta or {}, "tensors": [e.to_dict() for e in entries]},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fw:
        fw.write(MAGIC)
        fw.write(struct.pack("<I", len(header)))
        fw.write(header)
        for data in payload:
            fw.write(data)


def read_header(path: PathLike) -> Tuple[dict, int]:
    """Read the JSON header and the byte position of the payload"""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise TensorFileError(f"{path} is not a tensor container (bad magic {magic!r})")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise TensorFileError(f"{path} is truncated")
        (header_len,) = struct.unpack("<I", raw_len)
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorFileError(f"{path} has an unreadable header: {e}")
    return header, len(MAGIC) + 4 + header_len


def read_tensors(path: PathLike) -> TensorFile:
    """Read every tensor of a container

    Returns:
        TensorFile: arrays, header entries and metadata
    """
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    tensors = {}
    entries = {}
    for raw in header["tensors"]:
        entry = TensorEntry(
            name=raw["name"],
            shape=tuple(raw["shape"]),
            dtype=raw["dtype"],
            offset=raw["offset"],
            frozen=raw.get("frozen", False),
            adapter=raw.get("adapter"),
        )
        end = entry.offset + entry.nbytes
        if end > len(payload):
            raise TensorFileError(f"Tensor {entry.name} in {path} runs past the end of file")
        array = np.frombuffer(
            payload[entry.offset:end], dtype=_DTYPES[entry.dtype]
        ).reshape(entry.shape)
        tensors[entry.name] = array.astype(np.float32 if entry.dtype == "float32" else np.float64)
        entries[entry.name] = entry
    return TensorFile(tensors=tensors, entries=entries, meta=header.get("meta", {}))
