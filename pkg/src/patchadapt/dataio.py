"""Synthetic two-domain patches, tiling, and the on-disk dataset format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SAMPLE_MAGIC = b"PADS"
SAMPLE_VERSION = 1
MANIFEST = "manifest.tsv"
_HEADER = struct.Struct("<4sIIII")

# base colour per class: clutter, impervious, car, tree, low vegetation, building
PALETTE = np.array([
    [0.60, 0.22, 0.25],
    [0.78, 0.78, 0.76],
    [0.88, 0.76, 0.18],
    [0.14, 0.42, 0.16],
    [0.48, 0.68, 0.32],
    [0.32, 0.34, 0.66],
])


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class PatchSample:
    image: np.ndarray            # float32, C x H x W, values in [0, 1]
    label: np.ndarray | None     # uint8, H x W
    domain: str
    id: str
    difficulty: str | None = None
    pseudo_label: np.ndarray | None = None

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"{self.id}: domain must be 'source' or 'target', got {self.domain!r}")
        if self.label is not None and self.label.shape != self.image.shape[1:]:
            raise ValueError(
                f"{self.id}: label shape {self.label.shape} != image shape {self.image.shape[1:]}"
            )

    def __eq__(self, other):
        if not isinstance(other, PatchSample):
            return NotImplemented
        return (
            self.id == other.id and self.domain == other.domain
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and _opt_equal(self.label, other.label)
        )

    def unlabeled(self) -> PatchSample:
        return replace(self, label=None, pseudo_label=None)


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and np.array_equal(a, b)


@dataclass(frozen=True)
class DomainSpec:
    """Layout distribution and appearance transform of one synthetic domain.

    ``shift_range`` draws a per-patch strength t; the applied colour map is
    gain_t = 1 + t * (color_gain - 1), bias_t = t * color_bias. Sensor noise
    grows with the same strength: std = noise * (1 + noise_gain * t).
    """

    seed: int = 0
    domain: str = "source"
    n_classes: int = 6
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    region_scale: float = 10.0
    color_gain: tuple = (1.0, 1.0, 1.0)
    color_bias: tuple = (0.0, 0.0, 0.0)
    shift_range: tuple = (1.0, 1.0)
    noise: float = 0.06
    noise_gain: float = 0.0
    texture_amplitude: float = 0.08
    texture_freq: float = 0.35
    palette: tuple | None = None

    def validate(self) -> None:
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.class_weights) != self.n_classes or min(self.class_weights) <= 0:
            raise ValueError("class_weights must hold one positive weight per class")
        if any(g == 0 for g in self.color_gain):
            raise ValueError("appearance transform must be invertible (nonzero gains)")
        lo, hi = self.shift_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad shift_range {self.shift_range}")
        if self.region_scale <= 0 or self.noise < 0 or self.noise_gain < 0:
            raise ValueError("region_scale must be positive, noise and noise_gain non-negative")
        if self.palette is None and self.n_classes > len(PALETTE):
            raise ValueError(f"default palette covers {len(PALETTE)} classes; pass a palette")

    def colors(self) -> np.ndarray:
        return np.asarray(self.palette if self.palette is not None else PALETTE[:self.n_classes],
                          dtype=np.float64)


def default_specs(seed: int = 0, n_classes: int = 6) -> tuple[DomainSpec, DomainSpec]:
    """Source and target specs with both a colour shift and a layout shift.

    Target patches draw their shift strength uniformly from [0, 1], so the
    target set spans near-source patches up to fully shifted, noisier ones.
    """
    weights = tuple([1.0] * n_classes)
    tgt_weights = tuple(1.0 + 0.3 * np.cos(np.arange(n_classes) * 1.3))
    palette = None
    if n_classes > len(PALETTE):
        palette = tuple(map(tuple, np.random.default_rng(seed).uniform(0.1, 0.9, (n_classes, 3))))
    source = DomainSpec(seed=seed, domain="source", n_classes=n_classes,
                        class_weights=weights, palette=palette)
    target = DomainSpec(
        seed=seed + 7919, domain="target", n_classes=n_classes,
        class_weights=tgt_weights, region_scale=10.0,
        color_gain=(0.5, 1.3, 1.0), color_bias=(0.3, -0.15, -0.25),
        shift_range=(0.0, 1.0), noise=0.08, noise_gain=2.0, palette=palette,
    )
    return source, target


def _layout(rng, size: int, spec: DomainSpec) -> np.ndarray:
    # Voronoi regions with classes drawn from the layout distribution
    n_seeds = max(2, int(round((size / spec.region_scale) ** 2)) + 1)
    pts = rng.uniform(0, size, size=(n_seeds, 2))
    w = np.asarray(spec.class_weights, dtype=np.float64)
    cls = rng.choice(spec.n_classes, size=n_seeds, p=w / w.sum())
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    stretch = rng.uniform(0.6, 1.6)
    d = (yy[..., None] - pts[:, 0]) ** 2 * stretch + (xx[..., None] - pts[:, 1]) ** 2 / stretch
    return cls[d.argmin(axis=-1)].astype(np.uint8)


def _render(rng, label: np.ndarray, spec: DomainSpec) -> tuple[np.ndarray, float]:
    size_h, size_w = label.shape
    colors = spec.colors()
    img = colors[label].transpose(2, 0, 1).copy()
    yy, xx = np.mgrid[0:size_h, 0:size_w]
    phase = rng.uniform(0, 2 * np.pi)
    for c in range(spec.n_classes):
        theta = np.pi * c / spec.n_classes
        wave = np.sin(2 * np.pi * spec.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += spec.texture_amplitude * wave * (label == c)
    lo, hi = spec.shift_range
    t = rng.uniform(lo, hi) if hi > lo else lo
    img += rng.normal(0.0, spec.noise * (1.0 + spec.noise_gain * t), size=img.shape)
    gain = 1.0 + t * (np.asarray(spec.color_gain) - 1.0)
    bias = t * np.asarray(spec.color_bias)
    img = img * gain[:, None, None] + bias[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32), float(t)


def generate_domain(spec: DomainSpec, n_patches: int, size: int = 32,
                    downsample: int = 8, prefix: str | None = None) -> list[PatchSample]:
    """Deterministic labelled patches for one domain; labels exact by construction."""
    spec.validate()
    if size < 16 or size % downsample:
        raise ValueError(f"patch size must be >= 16 and a multiple of {downsample}, got {size}")
    if n_patches < 0:
        raise ValueError("n_patches must be non-negative")
    prefix = prefix if prefix is not None else ("src" if spec.domain == "source" else "tgt")
    out = []
    for i in range(n_patches):
        rng = np.random.default_rng([spec.seed, i])
        label = _layout(rng, size, spec)
        image, _ = _render(rng, label, spec)
        out.append(PatchSample(image, label, spec.domain, f"{prefix}-{i:05d}"))
    return out


def patch_shift(spec: DomainSpec, index: int, size: int = 32) -> float:
    """Appearance-shift strength used for patch ``index`` (diagnostics only)."""
    rng = np.random.default_rng([spec.seed, index])
    label = _layout(rng, size, spec)
    return _render(rng, label, spec)[1]


def tile(image, patch: int, stride: int, label=None, domain: str = "target",
         prefix: str = "tile") -> list[PatchSample]:
    """Row-major sliding windows of ``patch`` x ``patch`` over a C x H x W image."""
    image = np.asarray(getattr(image, "data", image))
    if image.ndim != 3:
        raise ValueError(f"expected C x H x W image, got shape {image.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    _, h, w = image.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image extent {h}x{w}")
    out = []
    for r, y in enumerate(range(0, h - patch + 1, stride)):
        for c, x in enumerate(range(0, w - patch + 1, stride)):
            lab = None if label is None else np.asarray(label)[y:y + patch, x:x + patch].copy()
            out.append(PatchSample(image[:, y:y + patch, x:x + patch].copy(), lab, domain,
                                   f"{prefix}-r{r:03d}c{c:03d}"))
    return out


def tile_count(h: int, w: int, patch: int, stride: int) -> int:
    return ((h - patch) // stride + 1) * ((w - patch) // stride + 1)


# on-disk format ---------------------------------------------------------

def encode_sample(sample: PatchSample) -> bytes:
    c, h, w = sample.image.shape
    parts = [_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, c, h, w),
             np.ascontiguousarray(sample.image, dtype="<f4").tobytes()]
    if sample.label is not None:
        if sample.label.min(initial=0) < 0 or sample.label.max(initial=0) > 255:
            raise DatasetError(f"{sample.id}: label values do not fit in one byte")
        parts.append(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_sample(raw: bytes, sample_id: str, domain: str) -> PatchSample:
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{sample_id}: truncated header")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise DatasetError(f"{sample_id}: bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        raise DatasetError(f"{sample_id}: unsupported version {version}")
    n_img = 4 * c * h * w
    rest = len(raw) - _HEADER.size - n_img
    if rest not in (0, h * w):
        raise DatasetError(
            f"{sample_id}: expected {n_img} image bytes (+{h * w} label bytes), "
            f"found {len(raw) - _HEADER.size}"
        )
    image = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=_HEADER.size)
    image = image.astype(np.float32).reshape(c, h, w)
    label = None
    if rest:
        label = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size + n_img).reshape(h, w).copy()
    return PatchSample(image, label, domain, sample_id)


def write_dataset(samples: Sequence[PatchSample], directory, labels: bool = True) -> Path:
    """One ``<id>.bin`` per sample plus a manifest sorted by id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seen = set()
    for s in samples:
        if s.id in seen:
            raise DatasetError(f"duplicate sample id {s.id}")
        if "/" in s.id or "\t" in s.id or s.id.startswith("."):
            raise DatasetError(f"sample id not usable as a file name: {s.id!r}")
        seen.add(s.id)
    rows = []
    for s in sorted(samples, key=lambda s: s.id):
        out = s if labels else s.unlabeled()
        (directory / f"{s.id}.bin").write_bytes(encode_sample(out))
        rows.append(f"{s.id}\t{s.domain}\t{int(out.label is not None)}\n")
    (directory / MANIFEST).write_text("".join(rows), encoding="utf-8")
    return directory


def read_dataset(directory) -> list[PatchSample]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"{directory}: missing {MANIFEST}")
    out = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DatasetError(f"{manifest}:{lineno}: malformed record {line!r}")
        sid, domain, has_label = parts
        path = directory / f"{sid}.bin"
        if not path.exists():
            raise DatasetError(f"{sid}: sample file missing")
        sample = decode_sample(path.read_bytes(), sid, domain)
        if (sample.label is not None) != (has_label == "1"):
            raise DatasetError(f"{sid}: label presence disagrees with manifest")
        out.append(sample)
    return out


# benchmark --------------------------------------------------------------

@dataclass
class Benchmark:
    source: list
    source_test: list
    target: list          # adaptation pool, labels stripped
    target_val: list
    target_test: list
    specs: tuple = field(default=(), repr=False)

    def splits(self) -> dict[str, list]:
        return {"source": self.source, "source_test": self.source_test,
                "target": self.target, "target_val": self.target_val,
                "target_test": self.target_test}

    def stats(self) -> dict:
        return {k: len(v) for k, v in self.splits().items()}


def make_benchmark(seed: int = 0, n_source: int = 240, n_target: int = 240,
                   n_test: int = 120, size: int = 32, n_classes: int = 6,
                   val_fraction: float = 0.1, specs=None) -> Benchmark:
    """Source/target splits; a seeded ``val_fraction`` of the target pool is held out."""
    src_spec, tgt_spec = specs if specs is not None else default_specs(seed, n_classes)
    source = generate_domain(src_spec, n_source, size, prefix="src")
    source_test = generate_domain(replace(src_spec, seed=src_spec.seed + 104729), n_test, size,
                                  prefix="srctest")
    target_all = generate_domain(tgt_spec, n_target, size, prefix="tgt")
    target_test = generate_domain(replace(tgt_spec, seed=tgt_spec.seed + 104729), n_test, size,
                                  prefix="tgttest")
    n_val = int(round(val_fraction * n_target))
    perm = np.random.default_rng([seed, 17]).permutation(n_target)
    val_idx = set(perm[:n_val].tolist())
    target_val = [s for i, s in enumerate(target_all) if i in val_idx]
    target = [s.unlabeled() for i, s in enumerate(target_all) if i not in val_idx]
    return Benchmark(source, source_test, target, target_val, target_test,
                     specs=(src_spec, tgt_spec))


def write_benchmark(bench: Benchmark, root) -> Path:
    root = Path(root)
    for name, samples in bench.splits().items():
        write_dataset(samples, root / name)
    return root


def read_benchmark(root) -> Benchmark:
    root = Path(root)
    parts = {name: read_dataset(root / name) for name in
             ("source", "source_test", "target", "target_val", "target_test")}
    parts["target"] = [s.unlabeled() for s in parts["target"]]
    return Benchmark(**parts)
