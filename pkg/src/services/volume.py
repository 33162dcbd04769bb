"""3D SUV and label volumes plus the `.pvol` container format.

Container layout (bit-exact):

    b"PVOL1\\n"
    one JSON header line: {"dims":[nx,ny,nz],"voxel_mm":[dx,dy,dz],"dtype":"f32le"|"u8",
                           "kind":"suv"|"label","num_classes":N}   (num_classes only for labels)
    b"\\x00"
    raw little-endian payload, x fastest (index = x + nx*(y + ny*z))

Arrays are held as numpy arrays of shape (nz, ny, nx) so that C-order flattening
is x-fastest.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import ClassIndexError, DataFormatError, GeometryError
from .models import ClassRoster

logger = logging.getLogger(__name__)

MAGIC = b"PVOL1\n"
SEPARATOR = b"\x00"

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]


def _check_geometry_fields(dims: Dims, voxel_mm: Spacing) -> None:
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise GeometryError(f"dims must be three integers >= 1, got {dims}", field="dims")
    if len(voxel_mm) != 3 or any(not float(v) > 0 for v in voxel_mm):
        raise GeometryError(f"voxel_mm must be three values > 0, got {voxel_mm}", field="voxel_mm")


def _frozen(array: np.ndarray, dtype: np.dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Volume3D:
    """Dense SUV field with voxel geometry. Immutable after construction."""

    dims: Dims
    voxel_mm: Spacing
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(v) for v in self.voxel_mm)
        _check_geometry_fields(dims, spacing)
        data = np.asarray(self.data)
        expected = dims[2] * dims[1] * dims[0]
        if data.size != expected:
            raise DataFormatError(
                f"data length {data.size} != nx*ny*nz = {expected}", field="data"
            )
        data = _frozen(data.reshape(dims[2], dims[1], dims[0]), np.float32)
        if not np.all(np.isfinite(data)):
            raise DataFormatError("SUV data contains non-finite values", field="data")
        if np.any(data < 0):
            raise DataFormatError("SUV data contains negative values", field="data")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_mm", spacing)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.data.shape

    @property
    def voxel_volume_ml(self) -> float:
        dx, dy, dz = self.voxel_mm
        return dx * dy * dz / 1000.0

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume with the same geometry."""
        return Volume3D(self.dims, self.voxel_mm, data)


@dataclass(frozen=True)
class LabelVolume:
    """Dense class-index field in [0, num_classes - 1]."""

    dims: Dims
    voxel_mm: Spacing
    data: np.ndarray = field(repr=False)
    num_classes: int = 2

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(v) for v in self.voxel_mm)
        _check_geometry_fields(dims, spacing)
        if not 1 <= int(self.num_classes) <= 255:
            raise ClassIndexError(f"num_classes must be in [1, 255], got {self.num_classes}")
        data = np.asarray(self.data)
        expected = dims[2] * dims[1] * dims[0]
        if data.size != expected:
            raise DataFormatError(
                f"data length {data.size} != nx*ny*nz = {expected}", field="data"
            )
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ClassIndexError(
                f"label values must lie in [0, {self.num_classes - 1}]", field="data"
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_mm", spacing)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "data", _frozen(data.reshape(dims[2], dims[1], dims[0]), np.uint8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def max_index(self) -> int:
        """S, the largest admissible class index."""
        return self.num_classes - 1

    @property
    def voxel_volume_ml(self) -> float:
        dx, dy, dz = self.voxel_mm
        return dx * dy * dz / 1000.0

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.dims, self.voxel_mm, data, self.num_classes)


AnyVolume = Union[Volume3D, LabelVolume]


def same_geometry(a: AnyVolume, b: AnyVolume) -> bool:
    return a.dims == b.dims and a.voxel_mm == b.voxel_mm


def check_geometry(a: AnyVolume, b: AnyVolume) -> None:
    """Raise GeometryError unless both volumes share dims and voxel size."""
    if not same_geometry(a, b):
        raise GeometryError(
            f"geometry mismatch: dims {a.dims} vs {b.dims}, voxel_mm {a.voxel_mm} vs {b.voxel_mm}"
        )


def one_hot_mask(labels: LabelVolume, s: int) -> Volume3D:
    """Binary mask (1.0 where label == s) with the label geometry.

    Raises:
        ClassIndexError: s outside [0, S]
    """
    if not 0 <= s <= labels.max_index:
        raise ClassIndexError(f"class index {s} outside [0, {labels.max_index}]", field="s")
    return Volume3D(labels.dims, labels.voxel_mm, (labels.data == s).astype(np.float32))


def check_roster(labels: LabelVolume, roster: ClassRoster) -> None:
    """Check that a roster matches a label volume's class count."""
    if roster.num_classes != labels.num_classes:
        raise ClassIndexError(
            f"roster has {roster.num_classes} classes, labels declare {labels.num_classes}"
        )


# =============================================================================
# CONTAINER I/O
# =============================================================================


def _header(volume: AnyVolume) -> dict[str, Any]:
    header: dict[str, Any] = {
        "dims": list(volume.dims),
        "voxel_mm": list(volume.voxel_mm),
    }
    if isinstance(volume, LabelVolume):
        header["dtype"] = "u8"
        header["kind"] = "label"
        header["num_classes"] = volume.num_classes
    else:
        header["dtype"] = "f32le"
        header["kind"] = "suv"
    return header


def encode_volume(volume: AnyVolume) -> bytes:
    """Serialize a volume to container bytes (deterministic)."""
    header = _header(volume)
    payload = np.ascontiguousarray(volume.data, dtype=_DTYPES[header["dtype"]]).tobytes(order="C")
    line = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    return MAGIC + line + SEPARATOR + payload


def decode_volume(blob: bytes) -> AnyVolume:
    """Parse container bytes.

    Raises:
        DataFormatError: bad magic, header, separator, dtype, payload length or values
    """
    if not blob.startswith(MAGIC):
        raise DataFormatError("bad magic, expected PVOL1", field="magic")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise DataFormatError("header line is not terminated", field="header")
    try:
        header = json.loads(blob[len(MAGIC) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"header is not valid JSON: {e}", field="header") from e
    if not isinstance(header, dict):
        raise DataFormatError("header must be a JSON object", field="header")
    if blob[end + 1 : end + 2] != SEPARATOR:
        raise DataFormatError("missing 0x00 separator after header", field="separator")

    for key in ("dims", "voxel_mm", "dtype", "kind"):
        if key not in header:
            raise DataFormatError(f"header lacks '{key}'", field=key)
    dtype_tag = header["dtype"]
    if dtype_tag not in _DTYPES:
        raise DataFormatError(f"unknown dtype tag '{dtype_tag}'", field="dtype")
    kind = header["kind"]
    expected_tag = {"suv": "f32le", "label": "u8"}.get(kind)
    if expected_tag is None:
        raise DataFormatError(f"unknown kind '{kind}'", field="kind")
    if expected_tag != dtype_tag:
        raise DataFormatError(f"kind '{kind}' requires dtype '{expected_tag}'", field="dtype")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(v) for v in header["voxel_mm"])
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"malformed geometry: {e}", field="dims") from e
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise DataFormatError(f"dims must be three integers >= 1, got {dims}", field="dims")

    dtype = _DTYPES[dtype_tag]
    payload = blob[end + 2 :]
    count = dims[0] * dims[1] * dims[2]
    if len(payload) != count * dtype.itemsize:
        raise DataFormatError(
            f"payload holds {len(payload)} bytes, header dims {list(dims)} need "
            f"{count * dtype.itemsize}",
            field="payload",
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims[2], dims[1], dims[0])

    try:
        if kind == "label":
            if "num_classes" not in header:
                raise DataFormatError("label header lacks 'num_classes'", field="num_classes")
            return LabelVolume(dims, spacing, data, int(header["num_classes"]))
        return Volume3D(dims, spacing, data)
    except (GeometryError, ClassIndexError) as e:
        raise DataFormatError(str(e), field=e.field or "data") from e


def write_volume(volume: AnyVolume, path: Path) -> None:
    """Write a volume; the same volume always yields the same bytes."""
    blob = encode_volume(volume)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise DataFormatError(f"cannot write {path}: {e}", field="path") from e
    logger.debug(f"Wrote {path} ({len(blob)} bytes)")


def read_volume(path: Path) -> AnyVolume:
    """Read a `.pvol` file written by write_volume."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}", field="path") from e
    try:
        return decode_volume(blob)
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}", field=e.field) from e


def read_suv(path: Path) -> Volume3D:
    volume = read_volume(path)
    if not isinstance(volume, Volume3D):
        raise DataFormatError(f"{path} holds labels, expected SUV", field="kind")
    return volume


def read_labels(path: Path) -> LabelVolume:
    volume = read_volume(path)
    if not isinstance(volume, LabelVolume):
        raise DataFormatError(f"{path} holds SUV, expected labels", field="kind")
    return volume


# =============================================================================
# JSON SIDECARS
# =============================================================================


def dumps_json(payload: Any) -> str:
    """Deterministic JSON text for sidecars, manifests and reports."""
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def write_json(payload: Any, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_json(payload), encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"cannot write {path}: {e}", field="path") from e


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}", field="path") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path} is not valid JSON: {e}", field="json") from e
