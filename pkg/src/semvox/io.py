"""Bit-exact file formats and dataset-directory ingestion.

Formats:

* PFM (grayscale "Pf"): text header (type, "W H", scale line whose sign
  encodes endianness, negative = little-endian), then W*H float32 samples in
  bottom-to-top row order. Writes are always little-endian; reads accept both.
* PGM ("P5"): binary, maxval 255, one byte per pixel, top-to-bottom. Class
  id 255 is reserved for UNLABELED.
* SOG1 voxel grids: magic "SOG1", little-endian u32 X Y Z, f32 voxel size,
  f32 origin x3, u32 counts and u8 resolved labels (255 = FREE), both in
  (k*Y + j)*X + i linearization. Histograms are not serialized.
* Checkpoints: magic "SDPT", u32 version, u32 param count, then per param
  u32 index, u32 rank, u32 dims, f64 data. Little-endian throughout.
* Manifests: CSV with header frame_id,disparity,labels,scale; paths are
  resolved relative to the manifest's directory, a missing scale means 1.0.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DuplicateFrameId,
    MalformedHeader,
    ManifestError,
    MaxvalUnsupported,
    SizeMismatch,
    SpecMismatch,
    TruncatedData,
)
from .geometry import CameraIntrinsics, LabeledCloud
from .voxel import FREE, GridSpec, OccupancyGrid, SemanticGrid

CHECKPOINT_MAGIC = b"SDPT"
CHECKPOINT_VERSION = 1
SOG_MAGIC = b"SOG1"


# PFM

def write_pfm(path, raster: np.ndarray) -> None:
    """Write a grayscale PFM; data is stored as little-endian float32."""
    raster = np.asarray(raster, dtype=np.float32)
    if raster.ndim != 2:
        raise ValueError(f"expected a 2D raster, got shape {raster.shape}")
    h, w = raster.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(raster).astype("<f4").tobytes())


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise MalformedHeader("unexpected end of header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array."""
    with open(path, "rb") as f:
        kind = _read_token(f)
        if kind == b"PF":
            raise MalformedHeader("color PFM not supported, grayscale 'Pf' only")
        if kind != b"Pf":
            raise MalformedHeader(f"not a PFM file (got {kind!r})")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from exc
        if w < 1 or h < 1 or scale == 0:
            raise MalformedHeader(f"bad dimensions or scale: {w} {h} {scale}")
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise TruncatedData(f"expected {4*w*h} bytes, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


# PGM

def write_pgm(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"expected a 2D raster, got shape {raster.shape}")
    if raster.min() < 0 or raster.max() > 255:
        raise ValueError("class ids must fit one byte")
    h, w = raster.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (maxval 255) into a uint8 (H, W) array."""
    with open(path, "rb") as f:
        kind = _read_token(f)
        if kind != b"P5":
            raise MalformedHeader(f"not a binary PGM (got {kind!r})")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from exc
        if maxval != 255:
            raise MaxvalUnsupported(f"maxval {maxval}, only 255 supported")
        payload = f.read(w * h)
        if len(payload) != w * h:
            raise TruncatedData(f"expected {w*h} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# SOG1 occupancy grids

def write_sog(path, grid: OccupancyGrid, semantics: SemanticGrid) -> None:
    """Write counts plus resolved labels; the label grid must match the spec."""
    if semantics.spec != grid.spec:
        raise SpecMismatch("occupancy and semantic grids disagree on spec")
    x, y, z = grid.spec.dims
    with open(path, "wb") as f:
        f.write(SOG_MAGIC)
        f.write(struct.pack("<IIIf", x, y, z, grid.spec.voxel_size))
        f.write(struct.pack("<fff", *grid.spec.origin))
        f.write(np.ravel(grid.counts, order="F").astype("<u4").tobytes())
        f.write(np.ravel(semantics.labels, order="F").astype(np.uint8).tobytes())


def read_sog(path) -> tuple[OccupancyGrid, SemanticGrid]:
    """Read a SOG1 file; the returned occupancy grid has empty histograms."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SOG_MAGIC:
            raise BadMagic(f"expected {SOG_MAGIC!r}, got {magic!r}")
        header = f.read(16 + 12)
        if len(header) != 28:
            raise TruncatedData("SOG1 header cut short")
        x, y, z, voxel_size = struct.unpack("<IIIf", header[:16])
        origin = struct.unpack("<fff", header[16:])
        n = x * y * z
        payload = f.read()
    if len(payload) != 4 * n + n:
        raise SizeMismatch(f"expected {4*n + n} payload bytes, got {len(payload)}")
    spec = GridSpec((x, y, z), float(voxel_size), tuple(float(v) for v in origin))
    counts = np.frombuffer(payload[: 4 * n], dtype="<u4").astype(np.int64)
    counts = counts.reshape((x, y, z), order="F")
    labels = np.frombuffer(payload[4 * n :], dtype=np.uint8)
    labels = labels.reshape((x, y, z), order="F").copy()
    return OccupancyGrid(spec, counts), SemanticGrid(spec, labels)


# checkpoints

def write_checkpoint(path, arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for index, arr in enumerate(arrays):
            arr = np.asarray(arr, dtype=np.float64)
            f.write(struct.pack("<II", index, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def read_checkpoint(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        head = f.read(8)
        if len(head) != 8:
            raise TruncatedData("checkpoint header cut short")
        version, count = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise MalformedHeader(f"unsupported checkpoint version {version}")
        arrays: list[np.ndarray] = []
        for expect in range(count):
            meta = f.read(8)
            if len(meta) != 8:
                raise TruncatedData("checkpoint parameter header cut short")
            index, rank = struct.unpack("<II", meta)
            if index != expect:
                raise MalformedHeader(f"parameter index {index}, expected {expect}")
            dims_raw = f.read(4 * rank)
            if len(dims_raw) != 4 * rank:
                raise TruncatedData("checkpoint dims cut short")
            dims = struct.unpack(f"<{rank}I", dims_raw) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            payload = f.read(8 * n)
            if len(payload) != 8 * n:
                raise TruncatedData("checkpoint data cut short")
            arrays.append(np.frombuffer(payload, dtype="<f8").reshape(dims).copy())
    return arrays


# manifests and sidecar files

@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    disparity_path: Path
    labels_path: Path
    scale: float = 1.0


def load_manifest(path) -> list[FrameRecord]:
    """Load a dataset manifest; file existence is checked at access time."""
    path = Path(path)
    records: list[FrameRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"frame_id", "disparity", "labels"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ManifestError(
                f"manifest needs columns frame_id,disparity,labels[,scale], "
                f"got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, 2):
            fid = (row.get("frame_id") or "").strip()
            disparity = (row.get("disparity") or "").strip()
            labels = (row.get("labels") or "").strip()
            if not (fid and disparity and labels):
                raise ManifestError(f"{path}:{lineno}: incomplete row")
            if fid in seen:
                raise DuplicateFrameId(fid)
            seen.add(fid)
            scale_str = (row.get("scale") or "").strip()
            records.append(FrameRecord(
                frame_id=fid,
                disparity_path=path.parent / disparity,
                labels_path=path.parent / labels,
                scale=float(scale_str) if scale_str else 1.0,
            ))
    return records


def read_intrinsics(path) -> CameraIntrinsics:
    """Parse a flat key=value intrinsics file (f_x, f_y, o_x, o_y, b)."""
    values: dict[str, float] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MalformedHeader(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            try:
                values[key.strip()] = float(raw.strip())
            except ValueError as exc:
                raise MalformedHeader(f"{path}:{lineno}: {exc}") from exc
    missing = {"f_x", "f_y", "o_x", "o_y", "b"} - values.keys()
    if missing:
        raise MalformedHeader(f"{path}: missing keys {sorted(missing)}")
    return CameraIntrinsics(values["f_x"], values["f_y"],
                            values["o_x"], values["o_y"], values["b"])


def write_cloud_ascii(path, cloud: LabeledCloud) -> None:
    """Plain-text export for external viewers: one 'x y z label' line per point."""
    with open(path, "w") as f:
        for (x, y, z), label in zip(cloud.xyz, cloud.labels):
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(label)}\n")
