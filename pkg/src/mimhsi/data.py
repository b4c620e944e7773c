"""Hyperspectral cube I/O, PCA band reduction, patch extraction, synthetic
labeled-cube generation, disjoint split manifests, and classification metrics.

Binary formats are little-endian: cubes are "HSIC" (u32 version, H, W, C,
then float32 pixel-major payload), label maps are "HSIL" (u32 H, W, then
uint16 payload). Split manifests are plain text, one "class row col split"
record per line. Storage is float32; all computation is float64.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
LABEL_MAGIC = b"HSIL"


class DataError(Exception):
    """Malformed or inconsistent on-disk data."""


@dataclass
class HsiCube:
    data: np.ndarray  # [H, W, C] float32

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def c(self):
        return self.data.shape[2]


@dataclass
class LabelMap:
    data: np.ndarray  # [H, W] uint16; 0 = unlabeled

    @property
    def n_classes(self):
        return int(self.data.max())


@dataclass
class SplitManifest:
    train: dict  # class id -> [(row, col), ...]
    test: dict


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise DataError(f"payload short: truncated while reading {what}")
    return buf


# -- cube format ----------------------------------------------------------------


def save_cube(path, cube: HsiCube):
    data = np.ascontiguousarray(cube.data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise DataError("cube contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<IIII", CUBE_VERSION, *data.shape))
        fh.write(data.tobytes())


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CUBE_MAGIC:
            raise DataError("bad cube magic")
        version, h, w, c = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != CUBE_VERSION:
            raise DataError(f"unsupported cube version {version}")
        payload = _read_exact(fh, 4 * h * w * c, "payload")
        if fh.read(1):
            raise DataError("trailing bytes after cube payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
    if not np.all(np.isfinite(data)):
        raise DataError("cube contains non-finite values")
    return HsiCube(data=data)


def save_labels(path, labels: LabelMap):
    data = np.ascontiguousarray(labels.data, dtype="<u2")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<II", *data.shape))
        fh.write(data.tobytes())


def load_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != LABEL_MAGIC:
            raise DataError("bad label map magic")
        h, w = struct.unpack("<II", _read_exact(fh, 8, "header"))
        payload = _read_exact(fh, 2 * h * w, "payload")
        if fh.read(1):
            raise DataError("trailing bytes after label payload")
    return LabelMap(data=np.frombuffer(payload, dtype="<u2").reshape(h, w).copy())


# -- split manifest ---------------------------------------------------------------


def save_manifest(path, manifest: SplitManifest):
    with open(path, "w", encoding="ascii") as fh:
        for split_name, table in (("train", manifest.train), ("test", manifest.test)):
            for cls in sorted(table):
                for r, c in table[cls]:
                    fh.write(f"{cls} {r} {c} {split_name}\n")


def load_manifest(path) -> SplitManifest:
    train, test = {}, {}
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4 or parts[3] not in ("train", "test"):
                raise DataError(f"bad manifest record at line {ln}")
            try:
                cls, r, c = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise DataError(f"bad manifest record at line {ln}") from exc
            table = train if parts[3] == "train" else test
            table.setdefault(cls, []).append((r, c))
    return SplitManifest(train=train, test=test)


# -- PCA ---------------------------------------------------------------------------


def pca_reduce(cube: HsiCube, k=60) -> HsiCube:
    """Project pixels onto the top-k eigenvectors of the band covariance.

    Components come out in descending eigenvalue order with the sign fixed so
    each component's largest-magnitude loading is positive. Rank-deficient
    covariance only triggers a warning; the requested components are still
    returned (trailing ones carry ~zero variance).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w, c = cube.data.shape
    n = h * w
    x = cube.data.reshape(n, c).astype(np.float64)
    xc = x - x.mean(axis=0)
    denom = max(n - 1, 1)
    cov = xc.T @ xc / denom
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    k_eff = min(k, c, n)
    rank = int((eigvals > max(eigvals[0], 0.0) * 1e-12).sum()) if eigvals[0] > 0 else 0
    if rank < k_eff:
        warnings.warn(f"covariance rank {rank} below requested {k_eff} components")
    basis = eigvecs[:, :k_eff]
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(k_eff)])
    flip[flip == 0] = 1.0
    basis = basis * flip
    proj = xc @ basis
    return HsiCube(data=proj.reshape(h, w, k_eff).astype(np.float32))


# -- patches -----------------------------------------------------------------------


def _reflect(idx, size):
    """Mirror an index into [0, size) without repeating the edge sample."""
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * size - 2
    m = np.mod(idx, period)
    return np.where(m >= size, period - m, m)


def extract_patch(cube: HsiCube, i, j, p):
    """p-by-p window centered on pixel (i, j), reflection-padded at borders."""
    if p % 2 == 0 or p < 1:
        raise ValueError("patch size must be odd")
    if not (0 <= i < cube.h and 0 <= j < cube.w):
        raise ValueError("center pixel out of bounds")
    half = (p - 1) // 2
    rows = _reflect(np.arange(i - half, i + half + 1), cube.h)
    cols = _reflect(np.arange(j - half, j + half + 1), cube.w)
    return cube.data[np.ix_(rows, cols)].astype(np.float64)


def extract_patches(cube: HsiCube, coords, p):
    """Stack of patches for an [N, 2] coordinate list, as float64 [N, p, p, C]."""
    coords = np.asarray(coords, dtype=np.intp)
    out = np.empty((len(coords), p, p, cube.c), dtype=np.float64)
    for n, (i, j) in enumerate(coords):
        out[n] = extract_patch(cube, int(i), int(j), p)
    return out


# -- synthetic scenes ---------------------------------------------------------------


def synth_generate(seed, h, w, c, k, noise=0.05):
    """Voronoi-region labels over 4k random sites plus smooth per-class spectra.

    Each class signature is a sum of three random Gaussians over the band
    index; pixels get their class signature plus i.i.d. Gaussian noise with
    sigma = noise * (signature range). Fully deterministic per seed.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    sites = rng.random((4 * k, 2)) * np.array([h, w])
    site_class = np.arange(4 * k) % k + 1

    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rr, cc], axis=-1).astype(np.float64) + 0.5
    d2 = ((pix[:, :, None, :] - sites[None, None, :, :]) ** 2).sum(axis=-1)
    labels = site_class[d2.argmin(axis=-1)].astype(np.uint16)

    bands = np.arange(c, dtype=np.float64)
    sigs = np.zeros((k, c))
    for cls in range(k):
        for _ in range(3):
            amp = rng.uniform(0.4, 1.4)
            center = rng.uniform(0.0, c - 1.0)
            width = rng.uniform(c / 16.0, c / 4.0)
            sigs[cls] += amp * np.exp(-0.5 * ((bands - center) / width) ** 2)
    sigma = noise * (sigs.max() - sigs.min())
    cube = sigs[labels - 1] + rng.normal(0.0, sigma, size=(h, w, c)) if sigma > 0 else sigs[labels - 1].copy()
    return HsiCube(data=cube.astype(np.float32)), LabelMap(data=labels)


def make_split(labels: LabelMap, train_per_class, seed) -> SplitManifest:
    """Deterministic per-class sample without replacement; the rest is test.

    Every class must keep at least one test pixel, so the train count has to
    be strictly below the class population.
    """
    rng = np.random.default_rng(seed)
    classes = sorted(int(v) for v in np.unique(labels.data) if v > 0)
    if not classes:
        raise DataError("label map has no labeled pixels")
    train, test = {}, {}
    for cls in classes:
        count = train_per_class[cls] if isinstance(train_per_class, dict) else int(train_per_class)
        coords = np.argwhere(labels.data == cls)
        if count < 1 or count >= len(coords):
            raise DataError(
                f"class {cls} has {len(coords)} pixels; train count {count} leaves no test set"
            )
        perm = rng.permutation(len(coords))
        train[cls] = [tuple(map(int, coords[i])) for i in perm[:count]]
        test[cls] = [tuple(map(int, coords[i])) for i in perm[count:]]
    return SplitManifest(train=train, test=test)


# -- metrics -------------------------------------------------------------------------


def confusion_matrix(true, pred, k):
    """k-by-k counts indexed [true - 1, pred - 1] for 1-based class ids."""
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(true) - 1, np.asarray(pred) - 1), 1)
    return cm


def metrics(confusion):
    """Overall accuracy, mean per-class accuracy, and Cohen's kappa.

    Classes with an empty row are excluded from the average accuracy with a
    warning; their per-class entry is reported as NaN.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0) or cm.sum() == 0:
        raise ValueError("confusion matrix needs nonnegative counts, some positive")
    total = cm.sum()
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    oa = np.trace(cm) / total
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.diag(cm) / rows
    empty = rows == 0
    if empty.any():
        warnings.warn(f"classes {np.where(empty)[0] + 1} have no samples; excluded from AA")
    aa = per_class[~empty].mean()
    pe = (rows * cols).sum() / (total * total)
    kappa = (oa - pe) / (1.0 - pe) if pe < 1.0 else 1.0
    return {"oa": float(oa), "aa": float(aa), "kappa": float(kappa), "per_class": per_class}


# -- classification map image ---------------------------------------------------------

# Fixed 16-entry palette (class id 1..16 -> RGB); class 0 renders black.
PALETTE = (
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
    (153, 153, 153), (0, 206, 209), (128, 0, 0), (0, 128, 128),
    (0, 0, 128), (128, 128, 0), (230, 170, 80), (64, 224, 120),
)


def write_class_map_ppm(path, class_map):
    """Binary P6 image of a class-id map using the fixed palette."""
    cm = np.asarray(class_map)
    lut = np.zeros((max(17, int(cm.max()) + 1), 3), dtype=np.uint8)
    for i, rgb in enumerate(PALETTE, start=1):
        lut[i] = rgb
    if cm.max() > 16:
        # classes beyond the palette cycle through it rather than failing
        for v in range(17, int(cm.max()) + 1):
            lut[v] = PALETTE[(v - 1) % 16]
    rgb = lut[cm]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cm.shape[1]} {cm.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
