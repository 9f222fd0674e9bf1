"""MetaImage (.mhd + .raw) reader/writer.

Supported subset: 3D, MET_UCHAR or MET_FLOAT elements, uncompressed
little-endian raw payload in a sidecar file, x-fastest ordering.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import HeaderParseError, PayloadLengthMismatchError, UnsupportedElementTypeError
from .volume import LabelMap, Volume

_ELEMENT_DTYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
}


def _parse_header(path: Path) -> dict:
    fields = {}
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise HeaderParseError(f"{path}: bad header line {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    for required in ("DimSize", "ElementType", "ElementDataFile"):
        if required not in fields:
            raise HeaderParseError(f"{path}: missing header key {required}")
    return fields


def load_metaimage(path: str | os.PathLike) -> Volume | LabelMap:
    """Load a .mhd header + raw payload.

    MET_UCHAR becomes a :class:`LabelMap`, MET_FLOAT a :class:`Volume`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such MetaImage header: {path}")
    fields = _parse_header(path)

    etype = fields["ElementType"]
    if etype not in _ELEMENT_DTYPES:
        raise UnsupportedElementTypeError(f"{path}: unsupported ElementType {etype}")
    dtype = _ELEMENT_DTYPES[etype]

    try:
        dims = tuple(int(v) for v in fields["DimSize"].split())
    except ValueError as exc:
        raise HeaderParseError(f"{path}: bad DimSize {fields['DimSize']!r}") from exc
    if len(dims) != 3:
        raise HeaderParseError(f"{path}: expected 3D DimSize, got {fields['DimSize']!r}")
    spacing = tuple(float(v) for v in fields.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(v) for v in fields.get("Offset", "0 0 0").split())

    raw_name = fields["ElementDataFile"]
    raw_path = path.parent / raw_name
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw payload: {raw_path}")
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise PayloadLengthMismatchError(
            f"{raw_path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    # file layout is x-fastest: reshape as (z, y, x) and transpose
    data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    if etype == "MET_UCHAR":
        return LabelMap(data, spacing, origin)
    return Volume(data.astype(np.float64), spacing, origin)


def save_metaimage(obj: Volume | LabelMap, path: str | os.PathLike) -> None:
    """Write a .mhd header plus .raw payload next to it."""
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw_path = path.with_suffix(".raw")
    if isinstance(obj, LabelMap):
        etype = "MET_UCHAR"
        out = obj.data.astype("<u1")
    else:
        etype = "MET_FLOAT"
        out = obj.data.astype("<f4")
    nx, ny, nz = obj.dims
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "CompressedData = False",
            f"DimSize = {nx} {ny} {nz}",
            f"ElementSpacing = {obj.spacing[0]:.17g} {obj.spacing[1]:.17g} {obj.spacing[2]:.17g}",
            f"Offset = {obj.origin[0]:.17g} {obj.origin[1]:.17g} {obj.origin[2]:.17g}",
            f"ElementType = {etype}",
            f"ElementDataFile = {raw_path.name}",
        ]
    )
    path.write_text(header + "\n")
    # x-fastest on disk
    raw_path.write_bytes(out.transpose(2, 1, 0).tobytes())
