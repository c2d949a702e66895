"""Multi-scale feature dictionary: construction, audit, serialization.

Representative images are picked by stratified sampling on the
(spatial-information, colorfulness) plane, cropped into non-overlapping
patches, pushed through the frozen backbone at scales 2..4, reduced with
PCA, and clustered with seeded K-means. The resulting entries plus
provenance metadata (backbone fingerprint, projection basis, corpus-mean
priors) are stored in a flat little-endian binary so identical builds are
byte-identical.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import correlate2d

from .errors import DictionaryFormatError, FingerprintMismatchError
from .physical import estimate_priors, validate_image

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


# --- diversity metrics ---


def compute_si(image: np.ndarray) -> float:
    """Spatial information: std of the Sobel gradient magnitude of luma,
    over the valid (border-free) region."""
    image = validate_image(image)
    luma = 0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]
    if luma.shape[0] < 3 or luma.shape[1] < 3:
        return 0.0
    gx = correlate2d(luma, _SOBEL_X, mode="valid")
    gy = correlate2d(luma, _SOBEL_Y, mode="valid")
    return float(np.sqrt(gx * gx + gy * gy).std())


def compute_cf(image: np.ndarray) -> float:
    """Colorfulness: opponent-channel statistic
    sqrt(var_rg + var_yb) + 0.3 * sqrt(mean_rg^2 + mean_yb^2)."""
    image = validate_image(image)
    rg = image[:, :, 0] - image[:, :, 1]
    yb = 0.5 * (image[:, :, 0] + image[:, :, 1]) - image[:, :, 2]
    sigma = np.sqrt(rg.var() + yb.var())
    mu = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(sigma + 0.3 * mu)


# --- patch extraction ---


@dataclass
class PatchSet:
    patches: list
    source_ids: list  # (image_id, row, col)


def crop_patches(image: np.ndarray, size: int = 128, image_id: int = 0) -> PatchSet:
    """Non-overlapping size x size tiles from the top-left region."""
    image = validate_image(image)
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    patches, ids = [], []
    for r in range(h // size):
        for c in range(w // size):
            patches.append(image[r * size : (r + 1) * size, c * size : (c + 1) * size])
            ids.append((image_id, r, c))
    return PatchSet(patches=patches, source_ids=ids)


def extract_features(patch: np.ndarray, scale: int, analysis) -> np.ndarray:
    """Frozen-backbone features of one patch at the given scale, float32
    (C, size/2**scale, size/2**scale)."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 patch, got {patch.shape}")
    if patch.shape[0] % 16 or patch.shape[1] % 16:
        raise ValueError("patch dimensions must be divisible by 16")
    x = torch.from_numpy(patch.transpose(2, 0, 1)[None])
    with torch.no_grad():
        feat = analysis.features_at_scale(x, scale)
    return feat[0].cpu().numpy().astype(np.float32)


# --- representative selection ---


def _equal_frequency_cells(values: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0, 1, bins + 1))
    cells = np.searchsorted(edges[1:-1], values, side="right")
    return cells


def select_representative_indices(si, cf, groups: int) -> list[int]:
    si = np.asarray(si, dtype=np.float64)
    cf = np.asarray(cf, dtype=np.float64)
    n = si.size
    if n == 0:
        raise ValueError("empty corpus")
    if groups > n:
        warnings.warn(f"groups={groups} exceeds corpus size {n}; reducing")
        groups = n
    gx = max(1, int(round(np.sqrt(groups))))
    gy = max(1, int(np.ceil(groups / gx)))
    cell_si = _equal_frequency_cells(si, gx)
    cell_cf = _equal_frequency_cells(cf, gy)
    cells: dict[tuple, list[int]] = {}
    for i in range(n):
        cells.setdefault((int(cell_si[i]), int(cell_cf[i])), []).append(i)

    chosen = []
    for key in sorted(cells):
        members = sorted(cells[key], key=lambda i: (-si[i], i))
        first = members[0]
        chosen.append(first)
        for cand in members[1:]:
            if si[cand] != si[first] or cf[cand] != cf[first]:
                chosen.append(cand)
                break
    return sorted(chosen)


def select_representatives(corpus: list, groups: int) -> tuple[list, list[int]]:
    """Stratified pick of 1-2 images per occupied (SI, CF) cell, highest SI
    first. Returns (images, indices into the corpus)."""
    si = [compute_si(img) for img in corpus]
    cf = [compute_cf(img) for img in corpus]
    idx = select_representative_indices(si, cf, groups)
    return [corpus[i] for i in idx], idx


# --- PCA + K-means ---


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    out = basis.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def _pca_fit(vectors: np.ndarray, dims: int):
    """Returns (mean, basis rows (p, d)); p <= dims limited by rank."""
    mean = vectors.mean(axis=0)
    centered = vectors - mean
    p = min(dims, vectors.shape[0], vectors.shape[1])
    if p == 0 or not np.any(centered):
        return mean, np.zeros((0, vectors.shape[1]))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return mean, _fix_signs(vt[:p])


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = ((data - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = data[rng.integers(n)]
            continue
        probs = d2 / total
        centers[i] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((data - centers[i]) ** 2).sum(axis=1))
    return centers


def lloyd_iterations(
    data: np.ndarray,
    centers: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> tuple[np.ndarray, list[float]]:
    """Plain Lloyd updates; returns final centers and the per-iteration
    objective trace (sum of squared distances), which is non-increasing."""
    centers = centers.copy()
    trace = []
    prev = None
    for _ in range(max_iter):
        d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        objective = float(d2[np.arange(data.shape[0]), assign].sum())
        trace.append(objective)
        for j in range(centers.shape[0]):
            members = data[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-covered point
                farthest = int(d2.min(axis=1).argmax())
                centers[j] = data[farthest]
        if prev is not None and prev - objective <= tol * max(prev, 1.0):
            break
        prev = objective
    return centers, trace


@dataclass
class ClusterResult:
    centroids: list
    objective_trace: list
    pca_mean: np.ndarray
    pca_basis: np.ndarray


def reduce_and_cluster(
    features: list,
    k: int,
    pca_dims: int,
    image_ids: list | None = None,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> ClusterResult:
    """Per-image PCA compaction, pooled projection, seeded K-means.

    Each source image's feature set is first projected onto its own
    top-``pca_dims`` subspace and reconstructed (compaction), then a global
    basis is fit on the pool; K-means++ / Lloyd runs in the global reduced
    space and the centroids are back-projected to feature shape. With
    N <= k the inputs are returned unchanged.
    """
    if not features:
        raise ValueError("no features to cluster")
    if k <= 0:
        raise ValueError("cluster count must be positive")
    shape = np.asarray(features[0]).shape
    vectors = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in features])
    if image_ids is None:
        image_ids = [0] * len(features)

    compacted = np.empty_like(vectors)
    for img in sorted(set(image_ids)):
        rows = [i for i, g in enumerate(image_ids) if g == img]
        mean, basis = _pca_fit(vectors[rows], pca_dims)
        coords = (vectors[rows] - mean) @ basis.T
        compacted[rows] = mean + coords @ basis

    g_mean, g_basis = _pca_fit(compacted, pca_dims)
    reduced = (compacted - g_mean) @ g_basis.T

    if len(features) <= k:
        return ClusterResult(
            centroids=[np.asarray(f, dtype=np.float32) for f in features],
            objective_trace=[],
            pca_mean=g_mean,
            pca_basis=g_basis,
        )

    rng = np.random.default_rng(seed)
    init = _kmeans_pp_init(reduced, k, rng)
    centers, trace = lloyd_iterations(reduced, init, max_iter=max_iter, tol=tol)
    centroids = centers @ g_basis + g_mean
    return ClusterResult(
        centroids=[c.reshape(shape).astype(np.float32) for c in centroids],
        objective_trace=trace,
        pca_mean=g_mean,
        pca_basis=g_basis,
    )


# --- the dictionary artifact ---


@dataclass
class FeatureDictionary:
    entries: dict  # scale -> float32 (K, C, h, w)
    k: int
    backbone_fingerprint: str
    patch_size: int
    corpus_T: np.ndarray  # (3,) mean transmission of the corpus
    corpus_A: np.ndarray  # (3,) mean ambient light of the corpus
    pca_basis: dict = field(default_factory=dict)  # scale -> {mean, basis}

    @property
    def scales(self) -> tuple:
        return tuple(sorted(self.entries))


DICT_MAGIC = b"UWFD"
DICT_VERSION = 1


def save_dictionary(dictionary: FeatureDictionary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DICT_MAGIC)
        fh.write(struct.pack("<B", DICT_VERSION))
        fh.write(bytes.fromhex(dictionary.backbone_fingerprint))
        fh.write(struct.pack("<IHB", dictionary.k, dictionary.patch_size, len(dictionary.entries)))
        fh.write(np.asarray(dictionary.corpus_A, dtype="<f4").tobytes())
        fh.write(np.asarray(dictionary.corpus_T, dtype="<f4").tobytes())
        for scale in dictionary.scales:
            arr = np.ascontiguousarray(dictionary.entries[scale], dtype="<f4")
            fh.write(struct.pack("<B4I", scale, *arr.shape))
            fh.write(arr.tobytes())
            meta = dictionary.pca_basis.get(scale)
            if meta is None:
                fh.write(struct.pack("<II", 0, 0))
            else:
                mean = np.ascontiguousarray(meta["mean"], dtype="<f4")
                basis = np.ascontiguousarray(meta["basis"], dtype="<f4")
                fh.write(struct.pack("<II", basis.shape[0], mean.size))
                fh.write(mean.tobytes())
                fh.write(basis.tobytes())


def load_dictionary(path, expected_fingerprint: str | None = None) -> FeatureDictionary:
    data = Path(path).read_bytes()
    if data[:4] != DICT_MAGIC:
        raise DictionaryFormatError("bad dictionary magic")
    if len(data) < 4 + 1 + 32 + 7 + 24:
        raise DictionaryFormatError("truncated dictionary file")
    if data[4] != DICT_VERSION:
        raise DictionaryFormatError(f"unknown dictionary version {data[4]}")
    pos = 5
    fingerprint = data[pos : pos + 32].hex()
    pos += 32
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            "dictionary fingerprint does not match the encoding backbone"
        )
    try:
        k, patch_size, n_scales = struct.unpack_from("<IHB", data, pos)
        pos += 7
        corpus_A = np.frombuffer(data, dtype="<f4", count=3, offset=pos).astype(np.float64)
        pos += 12
        corpus_T = np.frombuffer(data, dtype="<f4", count=3, offset=pos).astype(np.float64)
        pos += 12
        entries: dict = {}
        pca: dict = {}
        for _ in range(n_scales):
            scale, n, c, h, w = struct.unpack_from("<B4I", data, pos)
            pos += 17
            count = n * c * h * w
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            if arr.size != count:
                raise DictionaryFormatError("truncated entry block")
            entries[scale] = arr.reshape(n, c, h, w).copy()
            pos += 4 * count
            p, d = struct.unpack_from("<II", data, pos)
            pos += 8
            if d:
                mean = np.frombuffer(data, dtype="<f4", count=d, offset=pos).copy()
                pos += 4 * d
                basis = np.frombuffer(data, dtype="<f4", count=p * d, offset=pos)
                if basis.size != p * d:
                    raise DictionaryFormatError("truncated PCA block")
                pca[scale] = {"mean": mean, "basis": basis.reshape(p, d).copy()}
                pos += 4 * p * d
    except (struct.error, ValueError) as exc:
        raise DictionaryFormatError(f"malformed dictionary: {exc}") from exc
    return FeatureDictionary(
        entries=entries,
        k=int(k),
        backbone_fingerprint=fingerprint,
        patch_size=int(patch_size),
        corpus_T=corpus_T,
        corpus_A=corpus_A,
        pca_basis=pca,
    )


# --- build orchestration ---


@dataclass
class DiversityReport:
    rows: list  # (image_id, patch_row, patch_col, si, cf)

    def percentiles(self, qs=(5, 25, 50, 75, 95)) -> dict:
        si = np.array([r[3] for r in self.rows])
        cf = np.array([r[4] for r in self.rows])
        return {
            "si": {q: float(np.percentile(si, q)) for q in qs},
            "cf": {q: float(np.percentile(cf, q)) for q in qs},
        }

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "patch_row", "patch_col", "si", "cf"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", f"{row[4]:.6f}"])


def build_dictionary(
    corpus: list,
    analysis,
    backbone_fingerprint: str,
    k: int = 128,
    groups: int = 300,
    scales=(2, 3, 4),
    pca_dims: int = 64,
    patch_size: int = 128,
    seed: int = 0,
) -> tuple[FeatureDictionary, DiversityReport, dict]:
    """Full construction pipeline; deterministic given (corpus, seed,
    backbone). Returns (dictionary, diversity report, per-scale objective
    traces)."""
    if not corpus:
        raise ValueError("empty corpus")
    _, rep_idx = select_representatives(corpus, groups)

    all_patches: list = []
    ids: list = []
    priors_A, priors_T = [], []
    for img_i in rep_idx:
        img = corpus[img_i]
        pset = crop_patches(img, size=patch_size, image_id=img_i)
        all_patches.extend(pset.patches)
        ids.extend(pset.source_ids)
        est = estimate_priors(img)
        priors_A.append(est.A)
        priors_T.append(est.T.mean(axis=(0, 1)))

    order = sorted(range(len(ids)), key=lambda i: ids[i])
    all_patches = [all_patches[i] for i in order]
    ids = [ids[i] for i in order]

    report = DiversityReport(
        rows=[
            (sid[0], sid[1], sid[2], compute_si(p), compute_cf(p))
            for sid, p in zip(ids, all_patches)
        ]
    )

    entries: dict = {}
    pca_meta: dict = {}
    traces: dict = {}
    image_ids = [sid[0] for sid in ids]
    for scale in sorted(scales):
        feats = [extract_features(p, scale, analysis) for p in all_patches]
        result = reduce_and_cluster(
            feats, k=k, pca_dims=pca_dims, image_ids=image_ids, seed=seed
        )
        entries[scale] = np.stack(result.centroids).astype(np.float32)
        pca_meta[scale] = {
            "mean": result.pca_mean.astype(np.float32),
            "basis": result.pca_basis.astype(np.float32),
        }
        traces[scale] = result.objective_trace

    dictionary = FeatureDictionary(
        entries=entries,
        k=min(k, len(all_patches)),
        backbone_fingerprint=backbone_fingerprint,
        patch_size=patch_size,
        corpus_T=np.mean(priors_T, axis=0),
        corpus_A=np.mean(priors_A, axis=0),
        pca_basis=pca_meta,
    )
    return dictionary, report, traces
