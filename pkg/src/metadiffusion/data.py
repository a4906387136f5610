"""Field sequences, stress-strain curves, normalization and on-disk storage.

Storage layout of a dataset directory::

    tensors.bin      concatenated records: uint32 rank, uint32 dims[rank],
                     then little-endian float32 data
    manifest.jsonl   one JSON object per sample (id, seed, fill_fraction and,
                     per tensor, byte offset, length and CRC-32)
    stats.json       normalization extremes of the stored samples
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import UnitCell

STRAIN_LEVELS = np.array([0.002] + [0.02 * k for k in range(1, 11)])
CHANNELS = ("sigma22", "u1", "u2")
STRESS, U1, U2 = 0, 1, 2


class DegenerateChannelError(ValueError):
    """A channel has identical minimum and maximum, so min-max scaling is undefined."""


class CorruptRecordError(IOError):
    pass


class PairingError(ValueError):
    pass


def strain_levels(frames: int = 11) -> np.ndarray:
    """Strain levels for ``frames`` steps, subsampled evenly from the eleven defaults."""
    if frames == len(STRAIN_LEVELS):
        return STRAIN_LEVELS.copy()
    if frames < 1 or frames > len(STRAIN_LEVELS):
        raise ValueError(f"frames must be between 1 and {len(STRAIN_LEVELS)}")
    if frames == 1:
        return STRAIN_LEVELS[-1:].copy()
    idx = np.rint(np.linspace(0, len(STRAIN_LEVELS) - 1, frames)).astype(int)
    return STRAIN_LEVELS[idx]


@dataclass
class FieldSequence:
    """Per-design fields of shape (frames, 3, n, n) in the undeformed frame.

    Channel 0 is the vertical stress with compression counted positive,
    channels 1 and 2 are the horizontal and vertical displacements.
    """

    frames: np.ndarray
    strain_levels: np.ndarray = field(default_factory=lambda: STRAIN_LEVELS.copy())

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.strain_levels = np.asarray(self.strain_levels, dtype=float)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"expected (frames, 3, n, n), got {self.frames.shape}")
        if self.frames.shape[0] != len(self.strain_levels):
            raise ValueError("one strain level per frame required")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("field sequence contains non-finite values")

    @property
    def stress(self) -> np.ndarray:
        return self.frames[:, STRESS]

    @property
    def u1(self) -> np.ndarray:
        return self.frames[:, U1]

    @property
    def u2(self) -> np.ndarray:
        return self.frames[:, U2]


def curve_from_fields(seq: FieldSequence | np.ndarray, cell: UnitCell | None = None) -> np.ndarray:
    """Effective stress per frame from the average stress of every pixel row.

    At equilibrium every horizontal cut carries the same force, so each row
    average equals the effective stress; all rows are averaged. Void pixels
    count as zero stress.
    """
    stress = seq.stress if isinstance(seq, FieldSequence) else np.asarray(seq)[:, STRESS]
    if cell is not None:
        stress = stress * cell.pixels
    return stress.mean(axis=(1, 2))


def row_average_spread(seq: FieldSequence, cell: UnitCell | None = None) -> np.ndarray:
    """Std of per-row stress averages divided by their mean, per frame."""
    stress = seq.stress if cell is None else seq.stress * cell.pixels
    rows = stress.mean(axis=2)
    return rows.std(axis=1) / np.abs(rows.mean(axis=1))


# -- normalization -----------------------------------------------------------

def normalize(x, lo, hi):
    """Affine map of [lo, hi] onto [-1, 1]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise DegenerateChannelError(f"max must exceed min (min={lo}, max={hi})")
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def denormalize(y, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return (y + 1.0) * (hi - lo) / 2.0 + lo


@dataclass(frozen=True)
class NormalizationStats:
    field_min: tuple
    field_max: tuple
    curve_min: float
    curve_max: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.field_min, self.field_max)):
            raise DegenerateChannelError(f"degenerate field channel: {self.field_min} / {self.field_max}")
        if self.curve_max <= self.curve_min:
            raise DegenerateChannelError("degenerate stress-strain range")

    @classmethod
    def from_samples(cls, fields, curves) -> "NormalizationStats":
        fields = list(fields)
        curves = list(curves)
        if not fields:
            raise ValueError("normalization statistics need at least one sample")
        fmin = np.min([f.min(axis=(0, 2, 3)) for f in fields], axis=0)
        fmax = np.max([f.max(axis=(0, 2, 3)) for f in fields], axis=0)
        cmin = min(float(np.min(c)) for c in curves)
        cmax = max(float(np.max(c)) for c in curves)
        return cls(tuple(map(float, fmin)), tuple(map(float, fmax)), cmin, cmax)

    def _channel_bounds(self, ndim: int, channel_axis: int):
        shape = [1] * ndim
        shape[channel_axis] = 3
        return (np.reshape(self.field_min, shape), np.reshape(self.field_max, shape))

    def normalize_fields(self, frames, channel_axis: int = -3):
        frames = np.asarray(frames, dtype=float)
        lo, hi = self._channel_bounds(frames.ndim, channel_axis)
        return normalize(frames, lo, hi)

    def denormalize_fields(self, frames, channel_axis: int = -3):
        frames = np.asarray(frames, dtype=float)
        lo, hi = self._channel_bounds(frames.ndim, channel_axis)
        return denormalize(frames, lo, hi)

    def normalize_curve(self, curve):
        return normalize(np.asarray(curve, dtype=float), self.curve_min, self.curve_max)

    def denormalize_curve(self, curve):
        return denormalize(np.asarray(curve, dtype=float), self.curve_min, self.curve_max)

    def to_dict(self) -> dict:
        return {"field_min": list(self.field_min), "field_max": list(self.field_max),
                "curve_min": self.curve_min, "curve_max": self.curve_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["field_min"]), tuple(d["field_max"]), float(d["curve_min"]), float(d["curve_max"]))


# -- tensor records ------------------------------------------------------------

def encode_record(array) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes()


def decode_record(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise CorruptRecordError("record shorter than its header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    head = 4 + 4 * rank
    if len(buf) < head:
        raise CorruptRecordError("truncated shape header")
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    expected = head + 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        raise CorruptRecordError(f"record length {len(buf)} does not match shape {dims}")
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(dims).copy()


def append_record(fh, array) -> dict:
    blob = encode_record(array)
    offset = fh.tell()
    fh.write(blob)
    return {"offset": offset, "nbytes": len(blob), "crc32": zlib.crc32(blob)}


def read_record(fh, entry: dict) -> np.ndarray:
    fh.seek(entry["offset"])
    blob = fh.read(entry["nbytes"])
    if len(blob) != entry["nbytes"] or zlib.crc32(blob) != entry["crc32"]:
        raise CorruptRecordError(f"checksum mismatch at offset {entry['offset']}")
    return decode_record(blob)


def write_tensor_file(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_record(array))


def read_tensor_file(path) -> np.ndarray:
    return decode_record(Path(path).read_bytes())


# -- datasets ------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    cell: UnitCell
    fields: FieldSequence
    curve: np.ndarray
    seed: int | None = None


def build_dataset(samples, out_dir, compute_stats: bool = True):
    """Write samples to ``out_dir`` and return the manifest entries.

    Normalization statistics are computed over the written samples; with no
    samples the (empty) manifest is still written and statistics are refused.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    fields_all, curves_all = [], []
    ids = set()
    tmp_manifest = out / "manifest.jsonl.partial"
    with open(out / "tensors.bin", "wb") as fh:
        for s in samples:
            if s.fields is None or s.curve is None:
                raise PairingError(f"sample {s.id} lacks fields or curve")
            if s.id in ids:
                raise PairingError(f"duplicate sample id {s.id}")
            ids.add(s.id)
            curve = np.asarray(s.curve, dtype=float)
            if curve.shape != (s.fields.frames.shape[0],):
                raise PairingError(f"sample {s.id}: curve has {curve.shape}, fields have "
                                   f"{s.fields.frames.shape[0]} frames")
            if s.fields.frames.shape[2:] != s.cell.pixels.shape:
                raise PairingError(f"sample {s.id}: fields do not match the design grid")
            entries.append({
                "id": s.id,
                "seed": s.seed,
                "fill_fraction": s.cell.fill_fraction,
                "strain_levels": [float(v) for v in s.fields.strain_levels],
                "design": append_record(fh, s.cell.pixels),
                "fields": append_record(fh, s.fields.frames),
                "curve": append_record(fh, curve),
            })
            # statistics from the stored (float32) values so that reloads agree
            fields_all.append(s.fields.frames.astype("<f4").astype(float))
            curves_all.append(curve.astype("<f4").astype(float))
    with open(tmp_manifest, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    os.replace(tmp_manifest, out / "manifest.jsonl")
    if compute_stats:
        stats = NormalizationStats.from_samples(fields_all, curves_all)
        (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    return entries


class Dataset:
    """Read-only view over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.jsonl", encoding="utf-8") as fh:
            self.entries = [json.loads(line) for line in fh if line.strip()]
        stats_path = self.root / "stats.json"
        self.stats = (NormalizationStats.from_dict(json.loads(stats_path.read_text()))
                      if stats_path.exists() else None)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> Sample:
        e = self.entries[i]
        with open(self.root / "tensors.bin", "rb") as fh:
            pixels = read_record(fh, e["design"])
            frames = read_record(fh, e["fields"])
            curve = read_record(fh, e["curve"])
        cell = UnitCell(pixels.astype(np.uint8), seed=e.get("seed"))
        levels = e.get("strain_levels") or strain_levels(frames.shape[0])
        return Sample(e["id"], cell, FieldSequence(frames, levels), curve, e.get("seed"))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def arrays(self):
        """All fields (S, F, 3, n, n) and curves (S, F) as float32 arrays."""
        samples = list(self)
        return (np.stack([s.fields.frames for s in samples]),
                np.stack([s.curve for s in samples]))


# -- plain-text formats --------------------------------------------------------

def write_curve(path, curve) -> None:
    Path(path).write_text("".join(f"{float(v):.9g}\n" for v in curve))


def read_curve(path, length: int | None = None) -> np.ndarray:
    values = [float(line.split("#")[0]) for line in Path(path).read_text().splitlines()
              if line.split("#")[0].strip()]
    curve = np.array(values)
    if length is not None and len(curve) != length:
        raise ValueError(f"{path}: expected {length} stress values, found {len(curve)}")
    if not np.all(np.isfinite(curve)):
        raise ValueError(f"{path}: non-finite stress value")
    return curve


def write_pbm(path, pixels) -> None:
    """Plain (P1) portable bitmap; 1 = material (black)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    lines = [f"P1\n{w} {h}\n"]
    lines += [" ".join(str(int(v)) for v in row) + "\n" for row in pixels]
    Path(path).write_text("".join(lines))


def read_pbm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#")[0].split()
    if not tokens or tokens[0] != "P1":
        raise ValueError(f"{path}: not a plain PBM (P1) file")
    w, h = int(tokens[1]), int(tokens[2])
    bits = "".join(tokens[3:])
    if len(bits) != w * h or set(bits) - {"0", "1"}:
        raise ValueError(f"{path}: malformed bitmap data")
    return np.frombuffer(bits.encode(), dtype=np.uint8).reshape(h, w) - ord("0")


def write_kv(path, values: dict) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}\n")
    Path(path).write_text("".join(lines))


def _parse_scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_kv(path) -> dict:
    """``key = value`` lines; comma-separated values become lists."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#")[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: cannot parse line {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "," in value:
            out[key] = [_parse_scalar(v.strip()) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out
