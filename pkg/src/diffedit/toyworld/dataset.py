"""Toy datasets on disk: netpbm images, the text manifest, image grids and
oracle calibration."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics.rng import RngStream
from .oracles import CalibrationError, EmotionOracle, IdentityEmbedder
from .render import EMOTIONS, FaceSpec, render_batch, sample_specs


class NetpbmError(ValueError):
    pass


# netpbm ------------------------------------------------------------------------

def write_pnm(path, image) -> None:
    """Write a [0, 1] image as binary P5 (2-D) or P6 (H, W, 3), maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot store image of shape {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (``#`` comments skipped) and the offset after them."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise NetpbmError("truncated netpbm header")
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported netpbm type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise NetpbmError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    ch = 1 if magic == b"P5" else 3
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=off)
    shape = (h, w) if ch == 1 else (h, w, 3)
    return raw.reshape(shape).astype(np.float64) / maxval


def image_grid(rows, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile a list of rows (each a list of equal-shape 2-D images) into one image."""
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w = np.asarray(rows[0][0]).shape
    ncol = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad), fill)
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = img
    return out


# manifest ----------------------------------------------------------------------

@dataclass
class ToyDataset:
    ids: list[str]
    specs: list[FaceSpec]
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.emotion for s in self.specs], dtype=np.int64)

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.specs], dtype=np.float64)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset([self.ids[i] for i in idx], [self.specs[i] for i in idx], self.images[idx])


def make_dataset(n: int, seed: int, stream: int = 0, size: int = 16, balanced: bool = True,
                 prefix: str = "face") -> ToyDataset:
    specs = sample_specs(n, RngStream(seed, 0x64617461 + stream), balanced=balanced)
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    return ToyDataset(ids, specs, render_batch(specs, size))


def write_dataset(ds: ToyDataset, root) -> Path:
    """Images under ``root/images`` plus ``root/manifest.csv``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, spec, img in zip(ds.ids, ds.specs, ds.images):
            rel = f"images/{i}.pgm"
            write_pnm(root / rel, img)
            w.writerow([i, *(repr(float(v)) for v in spec.identity), spec.emotion, rel])
    return manifest


def read_manifest(path) -> ToyDataset:
    """Parse ``id,identity...,emotion_label,relative_image_path`` lines and load the images."""
    path = Path(path)
    ids, specs, images = [], [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 4:
                raise ValueError(f"{path}:{lineno}: expected id,identity...,label,path")
            try:
                identity = tuple(float(v) for v in row[1:-2])
                spec = FaceSpec(identity, int(row[-2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0])
            specs.append(spec)
            images.append(read_pnm(path.parent / row[-1]))
    if not ids:
        raise ValueError(f"{path}: empty manifest")
    return ToyDataset(ids, specs, np.stack(images))


# calibration -------------------------------------------------------------------

EMOTION_ACCURACY_TARGET = 0.98
IDENTITY_TRIPLE_TARGET = 0.95


def identity_triples(embedder: IdentityEmbedder, n: int, seed: int, size: int = 16) -> np.ndarray:
    """For ``n`` random triples, whether cos(same identity, other emotion) > cos(other identity)."""
    rng = RngStream(seed, 0x747269)
    a = sample_specs(n, rng)
    other_emo = (np.array([s.emotion for s in a]) + 1 + rng.integers(0, len(EMOTIONS) - 1, size=n)) % len(EMOTIONS)
    b = [FaceSpec(s.identity, int(e)) for s, e in zip(a, other_emo)]
    c = sample_specs(n, rng)
    ea, eb, ec = (embedder.transform(render_batch(s, size)) for s in (a, b, c))
    return np.sum(ea * eb, axis=1) > np.sum(ea * ec, axis=1)


def calibrate(oracle: EmotionOracle, embedder: IdentityEmbedder, held_out: ToyDataset,
              seed: int = 0, n_triples: int = 500, strict: bool = True) -> dict:
    """Check the frozen evaluators against their targets; raises on a miss when ``strict``."""
    acc = float(np.mean(oracle.predict(held_out.images) == held_out.labels))
    triples = float(np.mean(identity_triples(embedder, n_triples, seed, held_out.images.shape[1])))
    report = {"emotion_accuracy": acc, "identity_triples": triples}
    if strict and acc < EMOTION_ACCURACY_TARGET:
        raise CalibrationError(f"emotion oracle accuracy {acc:.3f} < {EMOTION_ACCURACY_TARGET}")
    if strict and triples < IDENTITY_TRIPLE_TARGET:
        raise CalibrationError(f"identity triples {triples:.3f} < {IDENTITY_TRIPLE_TARGET}")
    return report
