"""Scan file reading and writing.

Two on-disk forms carry the same fields per point (x y z ring azimuth t):

* ASCII: header line ``WLSCAN v1 count=<N> stamp=<float>`` followed by N
  whitespace-separated records.
* Binary: 16-byte magic ``WLSCANB1`` (zero padded), little-endian uint32
  count, float64 stamp, then N packed records (x, y, z float64, ring
  uint16, azimuth float64, t float64).

Readers auto-detect the form from the leading bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ASCII_MAGIC = b"WLSCAN v1"
BINARY_MAGIC = b"WLSCANB1" + b"\x00" * 8

_RECORD = np.dtype(
    [
        ("x", "<f8"),
        ("y", "<f8"),
        ("z", "<f8"),
        ("ring", "<u2"),
        ("azimuth", "<f8"),
        ("t", "<f8"),
    ]
)

N_RINGS = 32


class ScanFormatError(ValueError):
    """Malformed scan data; the message names the offending line or offset."""


@dataclass
class RawScan:
    """One LiDAR sweep: per-point coordinates, ring, azimuth and time."""

    xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ring: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    azimuth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stamp: float = 0.0
    scan_id: int = 0

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)


def _parse_header(line: str) -> tuple[int, float]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != "WLSCAN" or parts[1] != "v1":
        raise ScanFormatError(f"line 1: bad header {line!r}")
    try:
        count = int(parts[2].removeprefix("count="))
        stamp = float(parts[3].removeprefix("stamp="))
    except ValueError as exc:
        raise ScanFormatError(f"line 1: bad header field ({exc})") from exc
    if count < 0:
        raise ScanFormatError("line 1: negative point count")
    return count, stamp


def _check_points(scan: RawScan, where) -> None:
    bad = ~np.isfinite(scan.xyz).all(axis=1)
    bad |= ~np.isfinite(scan.azimuth) | ~np.isfinite(scan.time)
    if bad.any():
        i = int(np.argmax(bad))
        raise ScanFormatError(f"{where(i)}: non-finite field")
    out = (scan.ring < 0) | (scan.ring >= N_RINGS)
    if out.any():
        i = int(np.argmax(out))
        raise ScanFormatError(f"{where(i)}: ring {scan.ring[i]} outside [0, {N_RINGS - 1}]")


def parse_scan_text(text: str, scan_id: int = 0) -> RawScan:
    lines = text.splitlines()
    if not lines:
        raise ScanFormatError("line 1: empty file")
    count, stamp = _parse_header(lines[0])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ScanFormatError(f"line 1: count={count} but {len(body)} records follow")
    data = np.zeros(count, dtype=_RECORD)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 6:
            raise ScanFormatError(f"line {i + 2}: expected 6 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ScanFormatError(f"line {i + 2}: non-numeric field") from None
        if not all(np.isfinite(vals)):
            raise ScanFormatError(f"line {i + 2}: non-finite field")
        data["x"][i], data["y"][i], data["z"][i] = vals[0], vals[1], vals[2]
        if vals[3] != int(vals[3]):
            raise ScanFormatError(f"line {i + 2}: fractional ring index")
        data["ring"][i] = int(vals[3])
        data["azimuth"][i], data["t"][i] = vals[4], vals[5]
    scan = _from_records(data, stamp, scan_id)
    _check_points(scan, lambda i: f"line {i + 2}")
    return scan


def parse_scan_bytes(buf: bytes, scan_id: int = 0) -> RawScan:
    if len(buf) < 28:
        raise ScanFormatError("offset 0: truncated binary header")
    if buf[:16] != BINARY_MAGIC:
        raise ScanFormatError("offset 0: bad binary magic")
    count, stamp = struct.unpack_from("<Id", buf, 16)
    expected = 28 + count * _RECORD.itemsize
    if len(buf) != expected:
        raise ScanFormatError(f"offset {len(buf)}: expected {expected} bytes for {count} records")
    data = np.frombuffer(buf, dtype=_RECORD, count=count, offset=28)
    scan = _from_records(data, stamp, scan_id)
    _check_points(scan, lambda i: f"record {i} at offset {28 + i * _RECORD.itemsize}")
    return scan


def _from_records(data: np.ndarray, stamp: float, scan_id: int) -> RawScan:
    xyz = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    return RawScan(
        xyz=xyz,
        ring=data["ring"].astype(np.int32),
        azimuth=data["azimuth"].astype(float),
        time=data["t"].astype(float),
        stamp=float(stamp),
        scan_id=scan_id,
    )


def read_scan(path: str | Path, scan_id: int = 0) -> RawScan:
    """Read one scan file, auto-detecting ASCII vs binary."""
    raw = Path(path).read_bytes()
    if raw[:16] == BINARY_MAGIC:
        return parse_scan_bytes(raw, scan_id)
    if raw[: len(ASCII_MAGIC)] == ASCII_MAGIC:
        return parse_scan_text(raw.decode("ascii"), scan_id)
    raise ScanFormatError("offset 0: unrecognized scan magic")


def scan_to_text(scan: RawScan) -> str:
    lines = [f"WLSCAN v1 count={len(scan)} stamp={scan.stamp!r}"]
    for i in range(len(scan)):
        x, y, z = scan.xyz[i]
        lines.append(f"{x!r} {y!r} {z!r} {int(scan.ring[i])} {scan.azimuth[i]!r} {scan.time[i]!r}")
    return "\n".join(lines) + "\n"


def scan_to_bytes(scan: RawScan) -> bytes:
    data = np.zeros(len(scan), dtype=_RECORD)
    data["x"], data["y"], data["z"] = scan.xyz[:, 0], scan.xyz[:, 1], scan.xyz[:, 2]
    data["ring"] = scan.ring
    data["azimuth"] = scan.azimuth
    data["t"] = scan.time
    return BINARY_MAGIC + struct.pack("<Id", len(scan), scan.stamp) + data.tobytes()


def write_scan(path: str | Path, scan: RawScan, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(scan_to_bytes(scan))
    else:
        path.write_text(scan_to_text(scan))


def read_scan_dir(path: str | Path) -> list[RawScan]:
    """Read all scan files in a directory, ordered by filename."""
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    return [read_scan(p, scan_id=i) for i, p in enumerate(files)]
