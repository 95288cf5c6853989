"""Labelled sample containers and the on-disk dataset format.

A dataset directory holds::

    manifest.json   sample count, image size, generator/LBM parameters, seeds, splits
    images.bin      one byte per pixel, row-major, top row first, images concatenated
    labels.jsonl    one {"sample_id", "kxx", "kxy", "kyx", "kyy", "porosity"} per line
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lbm import LbmConfig, LbmError, lbm_permeability
from .microstructure import (check_binary, fill_isolated_pores, generate_microstructure,
                             percolates, porosity)
from .tensor import PermTensor, batch_eigenvalues, batch_symmetry_error

log = logging.getLogger(__name__)

LABEL_SYMMETRY_TOL = 1e-3


@dataclass
class LabeledSample:
    image: np.ndarray
    k: PermTensor
    porosity: float
    sample_id: int = 0

    def __post_init__(self):
        self.image = check_binary(self.image)
        phi = porosity(self.image)
        if abs(phi - self.porosity) > 1e-9:
            raise ValueError(f"sample {self.sample_id}: stored porosity {self.porosity} "
                             f"!= recomputed {phi}")


@dataclass
class GeneratorParams:
    size: int = 32
    correlation_length: float = 2.0
    porosity_mean: float = 0.711
    porosity_std: float = 0.124
    porosity_min: float = 0.55
    porosity_max: float = 0.9
    # a pore space spanning only one axis has a singular tensor
    require_both_axes: bool = True


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N, 4) float64, [kxx, kxy, kyx, kyy]
    porosity: np.ndarray  # (N,)
    sample_ids: np.ndarray  # (N,) int64
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.porosity[index],
                       self.sample_ids[index], dict(self.manifest))

    def split(self, name: str) -> "Dataset":
        splits = self.manifest.get("splits") or {}
        if name not in splits:
            raise KeyError(f"dataset has no split {name!r} (available: {sorted(splits)})")
        pos = {int(s): i for i, s in enumerate(self.sample_ids)}
        return self.subset([pos[int(s)] for s in splits[name]])

    def samples(self):
        for i in range(len(self)):
            yield LabeledSample(self.images[i], PermTensor.from_vector(self.labels[i]),
                                float(self.porosity[i]), int(self.sample_ids[i]))


def from_samples(samples, manifest: dict | None = None) -> Dataset:
    samples = list(samples)
    return Dataset(
        images=np.stack([s.image for s in samples]).astype(np.uint8),
        labels=np.array([s.k.as_vector() for s in samples]),
        porosity=np.array([s.porosity for s in samples]),
        sample_ids=np.array([s.sample_id for s in samples], dtype=np.int64),
        manifest=dict(manifest or {}),
    )


def check_labels(labels: np.ndarray, tol: float = LABEL_SYMMETRY_TOL) -> None:
    """Ingestion check for oracle labels: near-symmetric and positive-definite."""
    sym = batch_symmetry_error(labels)
    if np.any(sym >= tol):
        bad = int(np.argmax(sym))
        raise ValueError(f"label {bad} violates symmetry: |kxy-kyx| = {sym[bad]:.3e}")
    lo, _ = batch_eigenvalues(labels)
    if np.any(lo <= 0):
        raise ValueError(f"{int(np.sum(lo <= 0))} labels are not positive-definite")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def generate_dataset(n: int, seed: int, gen: GeneratorParams | None = None,
                     lbm: LbmConfig | None = None, splits: dict | None = None,
                     max_attempts: int | None = None) -> Dataset:
    """Generate -> fill isolated pores -> LBM label, until ``n`` samples pass.

    Samples whose pore space does not wrap around both axes (when
    ``gen.require_both_axes``), whose solve fails, or whose tensor is not
    positive-definite or not symmetric to 1e-3, are skipped and listed in ``manifest["skipped"]``.
    ``splits`` maps split names to fractions summing to 1; sample order
    inside each split follows generation order.
    """
    gen = gen or GeneratorParams()
    lbm = lbm or LbmConfig()
    max_attempts = max_attempts or 3 * n
    seeds = np.random.SeedSequence(seed).generate_state(max_attempts, dtype=np.uint64)
    samples, skipped, used_seeds = [], [], []
    for attempt in range(max_attempts):
        if len(samples) == n:
            break
        s = int(seeds[attempt])
        rng = np.random.default_rng(s)
        phi_t = float(np.clip(rng.normal(gen.porosity_mean, gen.porosity_std),
                              gen.porosity_min, gen.porosity_max))
        img = fill_isolated_pores(
            generate_microstructure(s, gen.size, gen.correlation_length, phi_t))
        try:
            if gen.require_both_axes and not all(percolates(img)):
                raise LbmError("pore space does not span both axes")
            k = lbm_permeability(img, lbm)
            kv = k.as_vector()[None]
            check_labels(kv)
        except (LbmError, ValueError) as exc:
            log.info("skipping attempt %d (seed %d): %s", attempt, s, exc)
            skipped.append({"attempt": attempt, "seed": s, "reason": str(exc)})
            continue
        samples.append(LabeledSample(img, k, porosity(img), sample_id=attempt))
        used_seeds.append(s)
    if len(samples) < n:
        log.warning("only %d of %d samples passed after %d attempts",
                    len(samples), n, max_attempts)
    params = {"generator": asdict(gen), "lbm": asdict(lbm), "seed": seed}
    manifest = {
        "sample_count": len(samples),
        "image_size": gen.size,
        **params,
        "seeds": used_seeds,
        "skipped": skipped,
        "config_hash": config_hash(params),
    }
    ds = from_samples(samples, manifest)
    if splits:
        ds.manifest["splits"] = assign_splits(ds.sample_ids, splits)
    return ds


def assign_splits(sample_ids, fractions: dict) -> dict:
    ids = [int(i) for i in sample_ids]
    total = sum(fractions.values())
    if not np.isclose(total, 1.0):
        raise ValueError(f"split fractions must sum to 1, got {total}")
    out, start = {}, 0
    names = list(fractions)
    for j, name in enumerate(names):
        stop = len(ids) if j == len(names) - 1 else start + int(round(fractions[name] * len(ids)))
        out[name] = ids[start:stop]
        start = stop
    return out


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(ds.manifest)
    manifest["sample_count"] = len(ds)
    manifest["image_size"] = ds.image_size
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "images.bin").write_bytes(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
    with open(out / "labels.jsonl", "w") as fh:
        for sid, k, phi in zip(ds.sample_ids, ds.labels, ds.porosity):
            rec = {"sample_id": int(sid), "kxx": float(k[0]), "kxy": float(k[1]),
                   "kyx": float(k[2]), "kyy": float(k[3]), "porosity": float(phi)}
            fh.write(json.dumps(rec) + "\n")
    return out


def load_dataset(path, check: bool = True) -> Dataset:
    """Read a dataset directory.  Porosity is recomputed and compared;
    with ``check`` the labels are also checked for symmetry and definiteness.
    A directory without ``labels.jsonl`` yields NaN labels (geometry only)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    n, size = int(manifest["sample_count"]), int(manifest["image_size"])
    raw = np.frombuffer((path / "images.bin").read_bytes(), dtype=np.uint8)
    if raw.size != n * size * size:
        raise ValueError(f"images.bin holds {raw.size} bytes, expected {n * size * size}")
    images = raw.reshape(n, size, size).copy()
    check_binary(images.reshape(n * size, size))
    phi = 1.0 - images.reshape(n, -1).mean(axis=1)
    label_file = path / "labels.jsonl"
    if not label_file.exists():
        ids = np.arange(n, dtype=np.int64)
        return Dataset(images, np.full((n, 4), np.nan), phi, ids, manifest)
    recs = [json.loads(line) for line in label_file.read_text().splitlines() if line.strip()]
    if len(recs) != n:
        raise ValueError(f"labels.jsonl has {len(recs)} records, manifest says {n}")
    labels = np.array([[r["kxx"], r["kxy"], r["kyx"], r["kyy"]] for r in recs], dtype=np.float64)
    stored_phi = np.array([r["porosity"] for r in recs])
    ids = np.array([r["sample_id"] for r in recs], dtype=np.int64)
    bad = np.abs(stored_phi - phi) > 1e-9
    if bad.any():
        raise ValueError(f"{int(bad.sum())} records disagree with recomputed porosity")
    if check:
        check_labels(labels)
    return Dataset(images, labels, phi, ids, manifest)
