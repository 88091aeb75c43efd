"""Frame-sequence ingestion, synthetic video generation, and checkpointing.

File formats (all little-endian, fully specified here):

* Frames are binary PPM (P6, maxval 255): ``P6\\n<w> <h>\\n255\\n`` followed by
  H*W RGB byte triples, row-major. Values map to floats as byte/255.
* Label maps are binary PGM (P5, maxval 255) with the same header shape;
  bytes are integer label ids (0 = background).
* Checkpoints are "VMC1" containers: magic ``VMC1``, u64 step counter, then
  length-prefixed sections (rng state as JSON, config echo as UTF-8 text),
  then three tables: named parameters, optimizer state (t plus m/v arrays per
  parameter), EMA target parameters. Array records carry name, dtype code,
  shape, and raw little-endian bytes. save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import Tensor, default_dtype

# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def _read_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse 'P6'/'P5', whitespace and # comments, width height maxval. Returns (w, h, offset)."""
    if data[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} magic at byte 0, found {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DataError(f"{path}: truncated header at byte {pos}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise DataError(f"{path}: non-numeric header field at byte {start}") from None
    if pos >= len(data):
        raise DataError(f"{path}: header ends without raster at byte {pos}")
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w < 1 or h < 1:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    return w, h, pos


def read_frame(path) -> Tensor:
    """Binary PPM (P6) -> channels-first float tensor in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    w, h, pos = _read_pnm_header(data, b"P6", path)
    need = w * h * 3
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: expected {need} raster bytes at offset {pos}, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return Tensor(arr.transpose(2, 0, 1).astype(default_dtype()) / 255.0)


def write_frame(path, frame) -> None:
    """Float (3,H,W) in [0, 1] -> binary PPM; exact inverse of read_frame for byte data."""
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"write_frame: need (3,H,W), got {arr.shape}")
    raster = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = raster.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raster.tobytes())


def read_labels(path) -> np.ndarray:
    """Binary PGM (P5) -> (H,W) uint8 label map."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    w, h, pos = _read_pnm_header(data, b"P5", path)
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: expected {w * h} raster bytes at offset {pos}, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.tobytes())


# ---------------------------------------------------------------------------
# Sequence store
# ---------------------------------------------------------------------------


@dataclass
class SequenceStore:
    """Directory of sequences: root/<name>/<%05d>.ppm and root/<name>/labels/<%05d>.pgm."""

    root: Path
    sequences: list[tuple[str, list[Path]]]

    @classmethod
    def open(cls, root) -> "SequenceStore":
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"{root}: not a directory")
        seqs = []
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            frames = sorted(d.glob("*.ppm"))
            if frames:
                seqs.append((d.name, frames))
        if not seqs:
            raise DataError(f"{root}: no sequences with .ppm frames found")
        return cls(root, seqs)

    def __len__(self) -> int:
        return len(self.sequences)

    def num_frames(self, idx: int) -> int:
        return len(self.sequences[idx][1])

    def frame(self, idx: int, t: int) -> Tensor:
        return read_frame(self.sequences[idx][1][t])

    def labels(self, idx: int, t: int) -> np.ndarray:
        name, frames = self.sequences[idx]
        return read_labels(self.root / name / "labels" / (frames[t].stem + ".pgm"))

    def has_labels(self, idx: int) -> bool:
        name, frames = self.sequences[idx]
        return (self.root / name / "labels" / (frames[0].stem + ".pgm")).is_file()


# ---------------------------------------------------------------------------
# Synthetic videos: rigid colored shapes with constant velocity over texture
# ---------------------------------------------------------------------------

_SHAPE_KINDS = ("circle", "square", "triangle")


def _raster_shape(kind: str, size: int, cy: int, cx: int, radius: int) -> np.ndarray:
    """Hard-edged inside test on the pixel grid; no anti-aliasing, so areas are exact."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    # triangle: downward-pointing half-plane cut of the square
    return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (radius - dy) / 2)


@dataclass
class SyntheticSequence:
    name: str
    frames: np.ndarray  # (F, 3, H, W) float in [0, 1]
    labels: np.ndarray  # (F, H, W) uint8


def gen_synthetic(seed: int, num_sequences: int, frames_per_seq: int, size: int) -> list[SyntheticSequence]:
    """Deterministic toy videos: 1-3 moving rigid shapes over a static textured background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = []
    for s in range(num_sequences):
        # Static per-sequence background: a low-frequency sinusoid mixture,
        # quantized to bytes so PPM round-trips are exact.
        base = rng.integers(60, 180, size=3).astype(np.float64)
        tex = np.zeros((3, size, size))
        for _ in range(3):
            fy, fx = rng.integers(1, 5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(15.0, 45.0, size=3)
            wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            tex += amp[:, None, None] * wave[None]
        background = np.clip(base[:, None, None] + tex, 0, 255).astype(np.uint8)
        num_shapes = int(rng.integers(1, 4))
        shapes = []
        for k in range(num_shapes):
            kind = _SHAPE_KINDS[int(rng.integers(0, len(_SHAPE_KINDS)))]
            radius = int(rng.integers(max(2, size // 10), max(3, size // 5)))
            vy, vx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
            # Start so the shape stays fully in frame for the whole sequence.
            lo_y = radius + max(0, -vy * (frames_per_seq - 1))
            hi_y = size - 1 - radius - max(0, vy * (frames_per_seq - 1))
            lo_x = radius + max(0, -vx * (frames_per_seq - 1))
            hi_x = size - 1 - radius - max(0, vx * (frames_per_seq - 1))
            if hi_y < lo_y or hi_x < lo_x:
                vy = vx = 0
                lo_y, hi_y = radius, size - 1 - radius
                lo_x, hi_x = radius, size - 1 - radius
            cy = int(rng.integers(lo_y, hi_y + 1))
            cx = int(rng.integers(lo_x, hi_x + 1))
            color = rng.integers(0, 256, size=3).astype(np.uint8)
            shapes.append((kind, radius, cy, cx, vy, vx, color))
        frames = np.empty((frames_per_seq, 3, size, size), dtype=np.float64)
        labels = np.zeros((frames_per_seq, size, size), dtype=np.uint8)
        for t in range(frames_per_seq):
            img = background.copy()
            lab = np.zeros((size, size), dtype=np.uint8)
            for k, (kind, radius, cy, cx, vy, vx, color) in enumerate(shapes):
                m = _raster_shape(kind, size, cy + vy * t, cx + vx * t, radius)
                img[:, m] = color[:, None]
                lab[m] = k + 1
            frames[t] = img.astype(np.float64) / 255.0
            labels[t] = lab
        out.append(SyntheticSequence(f"seq{s:03d}", frames, labels))
    return out


def write_store(root, sequences: list[SyntheticSequence]) -> None:
    root = Path(root)
    for seq in sequences:
        d = root / seq.name
        (d / "labels").mkdir(parents=True, exist_ok=True)
        for t in range(seq.frames.shape[0]):
            write_frame(d / f"{t:05d}.ppm", seq.frames[t])
            write_labels(d / "labels" / f"{t:05d}.pgm", seq.labels[t])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VMC1"
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    buf.write(struct.pack("<BB", _DTYPE_CODES[le.dtype], arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    raw = le.tobytes()
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(
                f"{self.path}: truncated at byte {self.pos}, wanted {n} more bytes"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def array(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u("<H")).decode("utf-8")
        code, ndim = self.u("<B"), self.u("<B")
        if code not in _CODE_DTYPES:
            raise DataError(f"{self.path}: unknown dtype code {code} at byte {self.pos}")
        shape = tuple(self.u("<I") for _ in range(ndim))
        nbytes = self.u("<Q")
        dtype = _CODE_DTYPES[code]
        expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expect:
            raise DataError(
                f"{self.path}: array {name!r} length field {nbytes} != shape-implied {expect}"
            )
        arr = np.frombuffer(self.take(nbytes), dtype=dtype).reshape(shape).copy()
        return name, arr


def save_checkpoint(
    path,
    config_text: str,
    step: int,
    online: dict[str, Tensor],
    target: dict[str, Tensor],
    opt_state: dict[str, dict],
    rng: np.random.Generator,
) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", step))
    rng_json = json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(rng_json)))
    buf.write(rng_json)
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(online)))
    for name, t in online.items():
        _pack_array(buf, name, t.data)
    buf.write(struct.pack("<I", len(opt_state)))
    for name, st in opt_state.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<Q", st["t"]))
        _pack_array(buf, "m", st["m"])
        _pack_array(buf, "v", st["v"])
    buf.write(struct.pack("<I", len(target)))
    for name, t in target.items():
        _pack_array(buf, name, t.data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    """Parse a VMC1 container fully before returning; no partial state escapes."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    step = r.u("<Q")
    rng_state = json.loads(r.take(r.u("<I")).decode("utf-8"))
    config_text = r.take(r.u("<I")).decode("utf-8")
    online = {}
    for _ in range(r.u("<I")):
        name, arr = r.array()
        online[name] = arr
    opt_state = {}
    for _ in range(r.u("<I")):
        name = r.take(r.u("<H")).decode("utf-8")
        t = r.u("<Q")
        mname, m = r.array()
        vname, v = r.array()
        if (mname, vname) != ("m", "v"):
            raise DataError(f"{path}: optimizer entry {name!r} has fields {mname!r}/{vname!r}")
        opt_state[name] = {"t": t, "m": m, "v": v}
    target = {}
    for _ in range(r.u("<I")):
        name, arr = r.array()
        target[name] = arr
    if r.pos != len(data):
        raise DataError(f"{path}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    return {
        "step": step,
        "rng_state": rng_state,
        "config_text": config_text,
        "online": online,
        "opt_state": opt_state,
        "target": target,
    }
