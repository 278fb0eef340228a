"""Synthetic segmentation samples, PPM/PGM image files, manifests and checkpoints."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

DIFFICULTIES = ("easy", "boundary", "textured")
FG_RANGE = (0.05, 0.6)

CKPT_MAGIC = b"GVEC"
CKPT_VERSION = 1


@dataclass
class SampleRecord:
    image: np.ndarray  # (1, 3, H, W) in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) in {0, 1}
    id: str
    seed: int | None = None
    shapes: list = field(default_factory=list)


def stack_records(records):
    """Batch a list of records into ``(images, masks)`` arrays."""
    if not records:
        return np.zeros((0, 3, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32)
    images = np.concatenate([r.image for r in records], axis=0).astype(np.float32)
    masks = np.concatenate([r.mask for r in records], axis=0).astype(np.float32)
    return images, masks


# rasterization ------------------------------------------------------------


def _pixel_centers(size):
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)  # xs, ys, indexed [row, col]


def _rasterize_ellipse(shape, size):
    xs, ys = _pixel_centers(size)
    ca, sa = math.cos(shape["angle"]), math.sin(shape["angle"])
    dx, dy = xs - shape["cx"], ys - shape["cy"]
    u = (dx * ca + dy * sa) / shape["rx"]
    v = (-dx * sa + dy * ca) / shape["ry"]
    return u * u + v * v <= 1.0


def _rasterize_polygon(shape, size):
    """Even-odd point-in-polygon test at pixel centers."""
    xs, ys = _pixel_centers(size)
    pts = np.asarray(shape["points"], dtype=np.float64)
    inside = np.zeros((size, size), dtype=bool)
    x0, y0 = pts[-1]
    for x1, y1 in pts:
        crosses = (y1 > ys) != (y0 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (ys - y1) * (x0 - x1) / (y0 - y1)
        inside ^= crosses & (xs < xint)
        x0, y0 = x1, y1
    return inside


def rasterize(shapes, size: int) -> np.ndarray:
    """Union of the given shapes as a (size, size) uint8 mask."""
    mask = np.zeros((size, size), dtype=bool)
    for shape in shapes:
        if shape["kind"] == "ellipse":
            mask |= _rasterize_ellipse(shape, size)
        elif shape["kind"] == "polygon":
            mask |= _rasterize_polygon(shape, size)
        else:
            raise DataError(f"unknown shape kind {shape['kind']!r}")
    return mask.astype(np.uint8)


# shape samplers -------------------------------------------------------------


def _ellipse(rng, size, rmin=0.12, rmax=0.35):
    rx, ry = rng.uniform(rmin, rmax, 2) * size
    margin = 0.1 * size
    return {
        "kind": "ellipse",
        "cx": float(rng.uniform(margin, size - margin)),
        "cy": float(rng.uniform(margin, size - margin)),
        "rx": float(rx),
        "ry": float(ry),
        "angle": float(rng.uniform(0, math.pi)),
    }


def _star(rng, size, cx, cy, radius):
    spikes = int(rng.integers(6, 10))
    inner = rng.uniform(0.3, 0.5)
    phase = rng.uniform(0, 2 * math.pi)
    pts = []
    for k in range(2 * spikes):
        r = radius * (1.0 if k % 2 == 0 else inner) * rng.uniform(0.85, 1.15)
        a = phase + math.pi * k / spikes
        pts.append([float(cx + r * math.cos(a)), float(cy + r * math.sin(a))])
    return {"kind": "polygon", "points": pts}


def _neck(cx0, cy0, cx1, cy1, width):
    length = math.hypot(cx1 - cx0, cy1 - cy0) or 1.0
    nx, ny = -(cy1 - cy0) / length * width / 2, (cx1 - cx0) / length * width / 2
    pts = [[cx0 + nx, cy0 + ny], [cx1 + nx, cy1 + ny], [cx1 - nx, cy1 - ny], [cx0 - nx, cy0 - ny]]
    return {"kind": "polygon", "points": [[float(x), float(y)] for x, y in pts]}


def _boundary_shapes(rng, size):
    margin = 0.22 * size
    c0 = rng.uniform(margin, size - margin, 2)
    c1 = rng.uniform(margin, size - margin, 2)
    r0, r1 = rng.uniform(0.14, 0.26, 2) * size
    return [
        _star(rng, size, c0[0], c0[1], r0),
        _star(rng, size, c1[0], c1[1], r1),
        _neck(c0[0], c0[1], c1[0], c1[1], rng.uniform(1.5, 3.0)),
    ]


def _value_noise(rng, size, base_cells, octaves=3):
    """Sum of bilinearly upsampled random grids, normalized to [0, 1]."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2**o
        grid = rng.random((cells + 1, cells + 1))
        t = np.linspace(0, cells, size, endpoint=False)
        i = t.astype(int)
        f = t - i
        f = f * f * (3 - 2 * f)
        g00 = grid[np.ix_(i, i)]
        g01 = grid[np.ix_(i, i + 1)]
        g10 = grid[np.ix_(i + 1, i)]
        g11 = grid[np.ix_(i + 1, i + 1)]
        fy, fx = f[:, None], f[None, :]
        out += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy)
        total += amp
        amp *= 0.5
    return out / total


def _contrasting_colors(rng, min_gap):
    while True:
        bg, fg = rng.random(3), rng.random(3)
        if np.abs(fg - bg).mean() >= min_gap:
            return fg, bg


def _render(rng, mask, difficulty, size):
    m = mask.astype(bool)[None]
    if difficulty == "easy":
        fg, bg = _contrasting_colors(rng, 0.3)
        img = np.where(m, fg[:, None, None], bg[:, None, None])
    elif difficulty == "boundary":
        fg, bg = _contrasting_colors(rng, 0.2)
        img = np.where(m, fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0, 0.04, img.shape)
    else:
        # Both regions are noisy; they differ in tint and in noise frequency.
        tint_fg, tint_bg = _contrasting_colors(rng, 0.12)
        n_fg = _value_noise(rng, size, 8)
        n_bg = _value_noise(rng, size, 3)
        fg_img = 0.5 * tint_fg[:, None, None] + 0.5 * n_fg[None]
        bg_img = 0.5 * tint_bg[:, None, None] + 0.5 * n_bg[None]
        img = np.where(m, fg_img, bg_img)
    img = np.clip(img, 0, 1)
    return (np.round(img * 255) / 255).astype(np.float32)


def generate_sample(index: int, size: int, difficulty: str, seed: int) -> SampleRecord:
    rng = np.random.default_rng([seed, index])
    for _ in range(1000):
        if difficulty == "boundary":
            shapes = _boundary_shapes(rng, size)
        elif difficulty == "textured":
            shapes = [_ellipse(rng, size)] if rng.random() < 0.5 else [_star(
                rng, size, *rng.uniform(0.3 * size, 0.7 * size, 2), rng.uniform(0.15, 0.3) * size)]
        else:
            shapes = [_ellipse(rng, size)]
        mask = rasterize(shapes, size)
        if FG_RANGE[0] <= mask.mean() <= FG_RANGE[1]:
            break
    else:  # pragma: no cover - the samplers above always land inside the range
        raise DataError(f"could not place a shape with foreground fraction in {FG_RANGE}")
    image = _render(rng, mask, difficulty, size)
    return SampleRecord(
        image=image[None],
        mask=mask.astype(np.float32)[None, None],
        id=f"{difficulty}_{seed}_{index:05d}",
        seed=seed,
        shapes=shapes,
    )


def gen_synthetic(count: int, size: int, difficulty: str = "easy", seed: int = 0):
    """``count`` deterministic samples; sample ``i`` depends only on ``(seed, i)``."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}, expected one of {DIFFICULTIES}")
    if size < 32:
        raise ValueError("size must be at least 32")
    return [generate_sample(i, size, difficulty, seed) for i in range(count)]


def perimeter(mask: np.ndarray) -> int:
    """Number of 4-neighbor foreground/background pixel edges, image border included."""
    m = np.pad(mask.astype(bool), 1)
    return int(np.count_nonzero(m[1:, :] != m[:-1, :]) + np.count_nonzero(m[:, 1:] != m[:, :-1]))


# PPM / PGM ----------------------------------------------------------------


def _to_bytes(t: np.ndarray) -> np.ndarray:
    return np.round(np.clip(t, 0.0, 1.0) * 255).astype(np.uint8)


def encode_pnm(t: np.ndarray) -> bytes:
    """P6 for a (1, 3, H, W) tensor, P5 for (1, 1, H, W) or (H, W)."""
    arr = np.asarray(t)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise FormatError(f"cannot encode tensor of shape {arr.shape} as PPM/PGM")
    _, c, h, w = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    payload = _to_bytes(arr[0]).transpose(1, 2, 0).tobytes()
    return magic + f" {w} {h} 255\n".encode("ascii") + payload


def write_image(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(t))


def decode_pnm(data: bytes, name="<bytes>") -> np.ndarray:
    """Parse binary P5/P6 data into a (1, C, H, W) float32 tensor in [0, 1]."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: malformed header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{name}: malformed header")
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{name}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        w, h, maxval = (int(tok) for tok in tokens[1:])
    except ValueError:
        raise FormatError(f"{name}: malformed header fields {tokens[1:]}") from None
    if w < 1 or h < 1 or maxval != 255:
        raise FormatError(f"{name}: unsupported dimensions {w}x{h} or maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    expected = w * h * c
    payload = data[pos:]
    if len(payload) < expected:
        raise FormatError(f"{name}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{name}: payload length {len(payload)} exceeds {expected} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0)[None]


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), str(path))


def read_mask(path) -> np.ndarray:
    """Read a P5 mask as a (1, 1, H, W) tensor thresholded at 128."""
    raw = Path(path).read_bytes()
    img = decode_pnm(raw, str(path))
    if img.shape[1] != 1:
        raise FormatError(f"{path}: masks must be single-channel PGM")
    return (np.round(img * 255) >= 128).astype(np.float32)


# manifest -----------------------------------------------------------------


def parse_manifest(path):
    """``(line_number, image_path, mask_path)`` triples; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not all(f.strip() for f in fields):
            raise DataError(f"{path}:{lineno}: expected 'image_path<TAB>mask_path', got {line!r}")
        img, msk = (base / f.strip() for f in fields)
        entries.append((lineno, img, msk))
    return entries


def load_manifest(path):
    """Load every image/mask pair listed in a manifest, in file order."""
    entries = parse_manifest(path)
    missing = [f"line {n}: {p}" for n, img, msk in entries for p in (img, msk) if not p.exists()]
    if missing:
        raise DataError(f"{path}: missing files: " + "; ".join(missing))
    records = []
    for lineno, img_path, mask_path in entries:
        image = read_image(img_path)
        mask = read_mask(mask_path)
        if image.shape[1] != 3:
            raise DataError(f"{path}:{lineno}: {img_path} is not an RGB PPM")
        if image.shape[2:] != mask.shape[2:]:
            raise DataError(f"{path}:{lineno}: image {image.shape[2:]} and mask {mask.shape[2:]} differ")
        records.append(SampleRecord(image=image, mask=mask, id=img_path.stem))
    return records


def write_dataset(records, out_dir) -> Path:
    """Write images, masks and ``manifest.tsv`` into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        img_name, mask_name = f"{r.id}.ppm", f"{r.id}_mask.pgm"
        write_image(out / img_name, r.image)
        write_image(out / mask_name, r.mask)
        lines.append(f"{img_name}\t{mask_name}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


# checkpoints --------------------------------------------------------------


def encode_checkpoint(tensors: dict, step: int = 0) -> bytes:
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(bytes([arr.ndim]))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", step))
    return b"".join(parts)


def save_checkpoint(path, tensors: dict, step: int = 0) -> None:
    """Write named float32 tensors and a step counter in the GVEC v1 layout."""
    Path(path).write_bytes(encode_checkpoint(tensors, step))


def decode_checkpoint(data: bytes, name="<bytes>"):
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{name}: payload length mismatch (file truncated at byte {len(data)})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{name}: bad magic {data[:4]!r}, not a GVEC checkpoint")
    pos = 4
    version = take(1)[0]
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        key = take(nlen).decode("utf-8")
        rank = take(1)[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[key] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (step,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise FormatError(f"{name}: payload length mismatch ({len(data) - pos} trailing bytes)")
    return tensors, step


def load_checkpoint(path):
    """Return ``(tensors, step)`` from a GVEC checkpoint file."""
    return decode_checkpoint(Path(path).read_bytes(), os.fspath(path))
