"""Paired clean/noisy datasets, patching and the synthetic toy noise family.

Images are float32 arrays of shape (H, W, C) with values in [0, 1]. On disk
they are 8-bit RGB PNGs converted by /255 (no gamma handling).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import DatasetError, InvalidConfigError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["clean_path", "noisy_path", "spec_kind", "spec_params", "seed"]
NOISE_KINDS = ("awgn", "poisson_gaussian", "correlated")


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def write_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = quantize(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Toy noise family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyNoiseSpec:
    """Known noise generator. ``sigma`` is in 1/255 units; for
    ``poisson_gaussian`` the per-pixel variance is ``a * clean + b``.
    """

    kind: str = "awgn"
    sigma: float = 25.0
    a: float = 0.0
    b: float = 0.0
    radius: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidConfigError(f"unknown noise kind {self.kind!r}")
        if min(self.sigma, self.a, self.b) < 0 or self.radius < 0:
            raise InvalidConfigError(f"negative noise parameter in {self}")

    def params_string(self) -> str:
        if self.kind == "awgn":
            return f"sigma={self.sigma:g}"
        if self.kind == "poisson_gaussian":
            return f"a={self.a:g};b={self.b:g}"
        return f"sigma={self.sigma:g};r={self.radius:d}"

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.params_string()}"

    @classmethod
    def parse(cls, kind: str, params: str) -> "ToyNoiseSpec":
        values = {}
        for item in filter(None, params.split(";")):
            key, _, val = item.partition("=")
            values[key.strip()] = float(val)
        if "r" in values:
            values["radius"] = int(values.pop("r"))
        try:
            return cls(kind=kind, **values)
        except TypeError as exc:
            raise InvalidConfigError(f"bad noise params {params!r} for {kind}") from exc

    def nominal_std(self, clean: np.ndarray | None = None) -> float:
        """Residual standard deviation in [0, 1] units, ignoring clipping."""
        if self.kind == "poisson_gaussian":
            mean_c = 0.5 if clean is None else float(np.mean(clean))
            return float(np.sqrt(self.a * mean_c + self.b))
        return self.sigma / 255.0


def apply_toy_noise(clean: np.ndarray, spec: ToyNoiseSpec, rng: np.random.Generator,
                    clip: bool = True) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float32)
    z = rng.standard_normal(clean.shape)
    if spec.kind == "awgn":
        noise = spec.sigma / 255.0 * z
    elif spec.kind == "poisson_gaussian":
        noise = np.sqrt(spec.a * clean.astype(np.float64) + spec.b) * z
    else:
        k = 2 * spec.radius + 1
        size = (k, k) + (1,) * (clean.ndim - 2)
        # box averaging of k*k iid samples divides the std by k
        noise = uniform_filter(z, size=size, mode="wrap") * k * (spec.sigma / 255.0)
    out = clean + noise.astype(np.float32)
    return np.clip(out, 0.0, 1.0) if clip else out


def procedural_clean(rng: np.random.Generator, size: int = 32, channels: int = 3) -> np.ndarray:
    """Smooth gradient plus random blobs, kept inside [0.2, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, channels))
    for ch in range(channels):
        gx, gy = rng.uniform(-0.3, 0.3, size=2)
        img[..., ch] = rng.uniform(0.35, 0.65) + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, size=2)
        radius = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-0.25, 0.25, size=channels)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img += blob[..., None] * amp
    img = gaussian_filter(img, sigma=(0.7, 0.7, 0))
    return np.clip(img, 0.2, 0.8).astype(np.float32)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class PairItem:
    clean_path: Path | None
    noisy_path: Path | None
    spec: ToyNoiseSpec | None = None
    seed: int | None = None
    group: str = ""


@dataclass
class PairDataset:
    items: list[PairItem] = field(default_factory=list)
    split: str = "train"
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.items)

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(clean, noisy) for item ``i``, loaded on first access."""
        if i not in self._cache:
            it = self.items[i]
            self._cache[i] = (read_png(it.clean_path), read_png(it.noisy_path))
        return self._cache[i]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.pair(i) for i in range(len(self))]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    @property
    def groups(self) -> list[str]:
        return [it.group for it in self.items]

    def subset(self, indices) -> "PairDataset":
        indices = list(indices)
        sub = PairDataset([self.items[i] for i in indices], self.split, self.root)
        for new, old in enumerate(indices):
            if old in self._cache:
                sub._cache[new] = self._cache[old]
        return sub

    @classmethod
    def from_arrays(cls, cleans, noisies, groups=None, split: str = "train") -> "PairDataset":
        if len(cleans) != len(noisies):
            raise DatasetError("clean and noisy lists differ in length")
        groups = groups if groups is not None else [""] * len(cleans)
        ds = cls([PairItem(None, None, group=g) for g in groups], split)
        for i, (c, n) in enumerate(zip(cleans, noisies)):
            c, n = np.asarray(c, np.float32), np.asarray(n, np.float32)
            if c.shape != n.shape:
                raise DatasetError(f"pair {i}: clean {c.shape} vs noisy {n.shape}")
            ds._cache[i] = (c, n)
        return ds


def _png_tree(folder: Path) -> dict[str, Path]:
    return {p.relative_to(folder).as_posix(): p for p in sorted(folder.rglob("*.png"))}


def read_manifest(root: Path) -> dict[str, dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["clean_path"]: row for row in csv.DictReader(fh)}


def load_dataset(root, split: str = "train") -> PairDataset:
    """Load a ``clean/`` + ``noisy/`` layout with matching file names.

    Items are sorted by relative path. A ``manifest.csv`` next to the two
    trees, when present, supplies each pair's noise label.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    clean = _png_tree(root / "clean") if (root / "clean").is_dir() else {}
    noisy = _png_tree(root / "noisy") if (root / "noisy").is_dir() else {}
    orphans = sorted(set(clean) ^ set(noisy))
    if orphans:
        name = orphans[0]
        side = "noisy" if name in noisy else "clean"
        missing = "clean" if side == "noisy" else "noisy"
        raise DatasetError(f"{root / side / name}: no matching {missing} file")
    if not clean:
        log.warning("dataset %s is empty", root)
        return PairDataset([], split, root)

    manifest = read_manifest(root)
    items = []
    for name in sorted(clean):
        with Image.open(clean[name]) as a, Image.open(noisy[name]) as b:
            if a.size != b.size:
                raise DatasetError(
                    f"{noisy[name]}: size {b.size} differs from clean {a.size}")
        row = manifest.get(f"clean/{name}")
        spec, seed, group = None, None, ""
        if row is not None:
            spec = ToyNoiseSpec.parse(row["spec_kind"], row["spec_params"])
            seed, group = int(row["seed"]), spec.label
        items.append(PairItem(clean[name], noisy[name], spec, seed, group))
    return PairDataset(items, split, root)


def extract_patches(img: np.ndarray, size: int, stride: int) -> list[np.ndarray]:
    h, w = img.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    return [img[y:y + size, x:x + size]
            for y in range(0, h - size + 1, stride)
            for x in range(0, w - size + 1, stride)]


def make_toy_dataset(root, specs, patches_per_spec: int, seed: int = 0, size: int = 32,
                     clean_sources=None, split: str = "train") -> PairDataset:
    """Write a toy dataset whose manifest records the generating noise spec.

    Clean patches are procedural unless ``clean_sources`` (PNG paths or arrays)
    is given, in which case patches are cut from those images.
    """
    root = Path(root)
    specs = list(specs)
    rng = np.random.default_rng(seed)
    pool = None
    if clean_sources:
        pool = []
        for src in clean_sources:
            img = read_png(src) if isinstance(src, (str, Path)) else np.asarray(src, np.float32)
            pool.extend(extract_patches(img, size, max(size // 2, 1)))
        if not pool:
            raise DatasetError("clean sources yielded no patches")

    rows = []
    index = 0
    for spec in specs:
        for _ in range(patches_per_spec):
            item_seed = int(rng.integers(0, 2**31 - 1))
            item_rng = np.random.default_rng(item_seed)
            if pool is None:
                clean = procedural_clean(item_rng, size)
            else:
                clean = pool[int(item_rng.integers(len(pool)))]
            clean = quantize(clean).astype(np.float32) / 255.0
            noisy = apply_toy_noise(clean, spec, item_rng)
            name = f"{index:05d}.png"
            write_png(root / "clean" / name, clean)
            write_png(root / "noisy" / name, noisy)
            rows.append({"clean_path": f"clean/{name}", "noisy_path": f"noisy/{name}",
                         "spec_kind": spec.kind, "spec_params": spec.params_string(),
                         "seed": item_seed})
            index += 1
    with open(root / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return load_dataset(root, split)
