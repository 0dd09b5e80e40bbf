"""Raster codecs, synthetic bi-temporal dataset, loading, checkpoints.

Images are binary PPM (P6, maxval 255); masks are binary PGM (P5, maxval
255, values {0,255}).  Both codecs round-trip bit-exactly.  The synthetic
generator is fully deterministic from its seed and produces the directory
layout the loader expects:

    root/{t1,t2,label_t1,label_t2,label_cd}/<id>.(ppm|pgm) + manifest.txt
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .layers import AdamState
from .tensor import ParamStore, Rng


class RasterError(ValueError):
    """Malformed or unsupported netpbm payload."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class DatasetError(ValueError):
    """Inconsistent dataset directory tree."""


# ---------------------------------------------------------------------------
# netpbm codecs


def _read_header(buf: bytes, magic: bytes, path):
    if buf[:2] != magic:
        raise RasterError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise RasterError(f"{path}: maxval {maxval} unsupported, expected 255")
    return width, height, pos


def read_raster(path) -> np.ndarray:
    """PPM -> (1,3,H,W) in [0,1]; PGM mask -> (1,1,H,W) in {0,1}. float32."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P6":
        channels = 3
    elif buf[:2] == b"P5":
        channels = 1
    else:
        raise RasterError(f"{path}: bad magic {buf[:2]!r}, expected P5 or P6")
    w, h, pos = _read_header(buf, buf[:2], path)
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) != need or len(buf) != pos + need:
        raise RasterError(f"{path}: payload is {len(buf) - pos} bytes, expected {need}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        if not np.isin(raw, (0, 255)).all():
            raise RasterError(f"{path}: mask values outside {{0,255}}")
        arr = (raw.reshape(1, 1, h, w) // 255).astype(np.float32)
    else:
        arr = raw.reshape(h, w, 3).transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return arr


def write_raster(path, arr: np.ndarray):
    """Inverse of read_raster; write/read/write is byte-identical."""
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise RasterError(f"{path}: raster shape must be (1,1|3,H,W), got {arr.shape}")
    _, c, h, w = arr.shape
    if c == 3:
        header = b"P6\n%d %d\n255\n" % (w, h)
        payload = np.round(arr[0] * 255.0).clip(0, 255).astype(np.uint8)
        payload = payload.transpose(1, 2, 0).tobytes()
    else:
        if not np.isin(arr, (0.0, 1.0)).all():
            raise RasterError(f"{path}: mask values must be binary 0/1")
        header = b"P5\n%d %d\n255\n" % (w, h)
        payload = (arr[0, 0] * 255).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_pgm_gray(path, values: np.ndarray):
    """Quantize a (H,W) probability map to 0..255 grayscale (p -> round(255 p))."""
    values = np.asarray(values)
    header = b"P5\n%d %d\n255\n" % (values.shape[1], values.shape[0])
    with open(path, "wb") as fh:
        fh.write(header + np.round(values * 255.0).clip(0, 255).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# samples and synthetic generation


@dataclass
class BiTemporalSample:
    id: str
    img_t1: np.ndarray
    img_t2: np.ndarray
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None
    m_cd: np.ndarray | None = None
    flags: tuple = (0, 0, 0)


@dataclass
class SynthSpec:
    seed: int = 42
    count: int = 100
    size: int = 64
    min_buildings: int = 3
    max_buildings: int = 8
    change_prob: float = 0.4
    texture_amp: float = 0.12
    offset: int = 0  # first scene index; lets splits share a seed without overlap


@dataclass
class _Rect:
    x0: int
    y0: int
    x1: int
    y1: int
    color: tuple

    def paint(self, img, mask):
        img[:, self.y0:self.y1, self.x0:self.x1] = np.array(self.color)[:, None, None]
        mask[self.y0:self.y1, self.x0:self.x1] = 1.0


def _sample_rect(rng: Rng, size: int, colors: set) -> _Rect:
    bw = rng.integers(6, min(20, size // 2) + 1)
    bh = rng.integers(6, min(20, size // 2) + 1)
    x0 = rng.integers(1, size - bw)
    y0 = rng.integers(1, size - bh)
    while True:
        # bright flat fills, clearly separated from the dark textured ground
        color = tuple(round(rng.random() * 102 + 140) / 255.0 for _ in range(3))
        if color not in colors:
            colors.add(color)
            return _Rect(x0, y0, x0 + bw, y0 + bh, color)


def synth_scene(spec: SynthSpec, index: int):
    """One deterministic scene: (img_t1, img_t2, m1, m2, m_cd) arrays."""
    rng = Rng(spec.seed * 1_000_000_007 + index)
    size = spec.size
    base = np.array([rng.random() * 0.2 + 0.15 for _ in range(3)], dtype=np.float64)
    noise = rng.uniform(-spec.texture_amp, spec.texture_amp, (3, size, size))
    background = np.clip(base[:, None, None] + noise, 0.0, 0.45)
    background = np.round(background * 255.0) / 255.0  # byte grid: exact roundtrip

    colors: set = set()
    k = rng.integers(spec.min_buildings, spec.max_buildings + 1)
    rects_t1 = [_sample_rect(rng, size, colors) for _ in range(k)]
    rects_t2 = []
    for r in rects_t1:
        if rng.random() < spec.change_prob:
            op = rng.integers(0, 3)
            if op == 0:  # demolition
                continue
            if op == 1:  # relocation: same footprint at a disjoint position
                bw, bh = r.x1 - r.x0, r.y1 - r.y0
                for _ in range(20):
                    x0 = rng.integers(1, size - bw)
                    y0 = rng.integers(1, size - bh)
                    if x0 >= r.x1 or x0 + bw <= r.x0 or y0 >= r.y1 or y0 + bh <= r.y0:
                        rects_t2.append(_Rect(x0, y0, x0 + bw, y0 + bh, r.color))
                        break
                continue
            # reconstruction elsewhere
            rects_t2.append(_sample_rect(rng, size, colors))
        else:
            rects_t2.append(r)

    def render(rects):
        img = background.copy()
        mask = np.zeros((size, size), dtype=np.float32)
        for r in rects:
            r.paint(img, mask)
        return img.astype(np.float32)[None], mask[None, None]

    img1, m1 = render(rects_t1)
    img2, m2 = render(rects_t2)
    m_cd = np.logical_xor(m1 > 0.5, m2 > 0.5).astype(np.float32)
    return img1, img2, m1, m2, m_cd


def gen_synth(spec: SynthSpec, out_dir) -> int:
    """Write the full synthetic tree; byte-identical for identical specs."""
    subdirs = ["t1", "t2", "label_t1", "label_t2", "label_cd"]
    for d in subdirs:
        os.makedirs(os.path.join(out_dir, d), exist_ok=True)
    manifest = []
    for i in range(spec.offset, spec.offset + spec.count):
        sid = f"scene_{i:05d}"
        img1, img2, m1, m2, m_cd = synth_scene(spec, i)
        write_raster(os.path.join(out_dir, "t1", sid + ".ppm"), img1)
        write_raster(os.path.join(out_dir, "t2", sid + ".ppm"), img2)
        write_raster(os.path.join(out_dir, "label_t1", sid + ".pgm"), m1)
        write_raster(os.path.join(out_dir, "label_t2", sid + ".pgm"), m2)
        write_raster(os.path.join(out_dir, "label_cd", sid + ".pgm"), m_cd)
        manifest.append(f"{sid} 1 1 1\n")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.writelines(manifest)
    return spec.count


def load_dataset(root, split=None):
    """Samples sorted by id; missing label dirs lower the matching flag."""
    base = os.path.join(root, split) if split else root
    t1_dir = os.path.join(base, "t1")
    if not os.path.isdir(t1_dir):
        raise DatasetError(f"no t1/ directory under {base}")
    ids = sorted(os.path.splitext(f)[0] for f in os.listdir(t1_dir) if f.endswith(".ppm"))
    has_t2 = os.path.isdir(os.path.join(base, "t2"))
    samples = []
    for sid in ids:
        img_t1 = read_raster(os.path.join(t1_dir, sid + ".ppm"))
        if has_t2:
            t2_path = os.path.join(base, "t2", sid + ".ppm")
            if not os.path.exists(t2_path):
                raise DatasetError(f"id {sid} present in t1/ but missing in t2/")
            img_t2 = read_raster(t2_path)
        else:
            img_t2 = img_t1
        masks = []
        flags = []
        for d in ("label_t1", "label_t2", "label_cd"):
            path = os.path.join(base, d, sid + ".pgm")
            if os.path.exists(path):
                masks.append(read_raster(path))
                flags.append(1)
            else:
                masks.append(None)
                flags.append(0)
        if not has_t2:
            flags[1] = flags[2] = 0
            masks[1] = masks[2] = None
        samples.append(BiTemporalSample(sid, img_t1, img_t2,
                                        masks[0], masks[1], masks[2], tuple(flags)))
    return samples


# ---------------------------------------------------------------------------
# checkpoint format

_MAGIC = b"MSSF"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FROM = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def _write_tensor(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_tensor(fh, path):
    raw = fh.read(2)
    if len(raw) != 2:
        raise CheckpointError(f"{path}: truncated tensor record")
    (nlen,) = struct.unpack("<H", raw)
    name = fh.read(nlen).decode("utf-8")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _DTYPE_FROM:
        raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dtype = _DTYPE_FROM[code].newbyteorder("<")
    need = int(np.prod(dims)) * dtype.itemsize
    payload = fh.read(need)
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload for {name!r} is {len(payload)} bytes, "
                              f"expected {need}")
    return name, np.frombuffer(payload, dtype=dtype).reshape(dims).astype(_DTYPE_FROM[code])


def save_checkpoint(path, store: ParamStore, opt: AdamState | None = None, epoch: int = 0):
    records = [(p.name, p.value) for p in store]
    if opt is not None:
        for name in store.names():
            records.append((f"opt/m/{name}", opt.m[name]))
            records.append((f"opt/v/{name}", opt.v[name]))
        meta = np.array([opt.step, opt.lr, opt.beta1, opt.beta2,
                         opt.weight_decay, opt.eps, epoch], dtype=np.float64)
        records.append(("opt/meta", meta))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(records)))
        for name, arr in records:
            _write_tensor(fh, name, arr)


def load_checkpoint(path):
    """Returns (params: dict, opt_m: dict, opt_v: dict, meta: array or None)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {_VERSION}")
        params, opt_m, opt_v, meta = {}, {}, {}, None
        for _ in range(count):
            name, arr = _read_tensor(fh, path)
            if name == "opt/meta":
                meta = arr
            elif name.startswith("opt/m/"):
                target, key = opt_m, name[6:]
            elif name.startswith("opt/v/"):
                target, key = opt_v, name[6:]
            else:
                target, key = params, name
            if name != "opt/meta":
                if key in target:
                    raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
                target[key] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return params, opt_m, opt_v, meta


def restore_checkpoint(path, store: ParamStore, opt: AdamState | None = None) -> int:
    """Copy checkpoint values into an existing store/optimizer; returns epoch."""
    params, opt_m, opt_v, meta = load_checkpoint(path)
    for p in store:
        if p.name not in params:
            raise CheckpointError(f"{path}: missing parameter {p.name!r}")
        if params[p.name].shape != p.value.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name!r}: "
                                  f"{params[p.name].shape} vs {p.value.shape}")
        p.value[...] = params[p.name]
    if opt is not None and meta is not None:
        opt.step = int(meta[0])
        opt.lr, opt.beta1, opt.beta2 = float(meta[1]), float(meta[2]), float(meta[3])
        opt.weight_decay, opt.eps = float(meta[4]), float(meta[5])
        for name in store.names():
            opt.m[name][...] = opt_m[name]
            opt.v[name][...] = opt_v[name]
    return int(meta[6]) if meta is not None else 0
