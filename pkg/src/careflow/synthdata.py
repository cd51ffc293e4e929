"""Synthetic multimodal data with a known cross-modality correspondence.

Every sample carries a latent ``z``; each modality observes
``U_m = A_m z + b_m + noise``.  Because the maps are known, the noise-free
transport between modalities is available as a test oracle.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import make_rng

MODALITIES = ("a", "v", "l")
SPLITS = ("train", "val", "test")


class SpecError(ValueError):
    pass


@dataclass
class DatasetSpec:
    task: str
    latent_dim: int
    centers: np.ndarray  # [C x k]; regression uses a single row as the latent mean
    latent_std: float
    maps: dict[str, np.ndarray]  # modality -> A_m [d_m x k]
    offsets: dict[str, np.ndarray]  # modality -> b_m [d_m]
    noise: dict[str, float]
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0
    name: str = "custom"
    label_weights: np.ndarray | None = None  # regression: y = w . z + noise
    label_noise: float = 0.0
    label_range: tuple[float, float] = (-3.0, 3.0)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0] if self.task == "classification" else 0

    @property
    def raw_dims(self) -> dict[str, int]:
        return {m: int(self.maps[m].shape[0]) for m in MODALITIES}

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def validate(self) -> None:
        if self.task not in ("regression", "classification"):
            raise SpecError(f"unknown task {self.task!r}")
        k = self.latent_dim
        if self.centers.ndim != 2 or self.centers.shape[1] != k:
            raise SpecError(f"centers must have shape [C x {k}]")
        if self.latent_std < 0:
            raise SpecError("latent_std must be >= 0")
        if set(self.maps) != set(MODALITIES) or set(self.offsets) != set(MODALITIES) or set(self.noise) != set(MODALITIES):
            raise SpecError(f"maps, offsets and noise need exactly the modalities {MODALITIES}")
        for m in MODALITIES:
            a = self.maps[m]
            if a.ndim != 2 or a.shape[1] != k:
                raise SpecError(f"map for {m} must have shape [d_{m} x {k}]")
            if np.linalg.matrix_rank(a) < k:
                raise SpecError(f"map for {m} is rank deficient")
            if self.offsets[m].shape != (a.shape[0],):
                raise SpecError(f"offset for {m} must have length {a.shape[0]}")
            if self.noise[m] < 0:
                raise SpecError(f"noise for {m} must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise SpecError("split sizes must be >= 0")
        if self.task == "regression":
            if self.label_weights is None or self.label_weights.shape != (k,):
                raise SpecError(f"regression needs label_weights of length {k}")
            lo, hi = self.label_range
            if not lo < hi:
                raise SpecError("label_range must be increasing")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "seed": self.seed,
            "latent_dim": self.latent_dim,
            "centers": self.centers.tolist(),
            "latent_std": self.latent_std,
            "maps": {m: self.maps[m].tolist() for m in MODALITIES},
            "offsets": {m: self.offsets[m].tolist() for m in MODALITIES},
            "noise": {m: self.noise[m] for m in MODALITIES},
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "label_weights": None if self.label_weights is None else self.label_weights.tolist(),
            "label_noise": self.label_noise,
            "label_range": list(self.label_range),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown dataset keys: {sorted(unknown)}")
        missing = {"task", "latent_dim", "centers", "latent_std", "maps", "offsets", "noise",
                   "n_train", "n_val", "n_test"} - set(doc)
        if missing:
            raise SpecError(f"missing dataset keys: {sorted(missing)}")
        try:
            spec = cls(
                task=doc["task"],
                latent_dim=int(doc["latent_dim"]),
                centers=np.asarray(doc["centers"], dtype=np.float64),
                latent_std=float(doc["latent_std"]),
                maps={m: np.asarray(doc["maps"][m], dtype=np.float64) for m in MODALITIES},
                offsets={m: np.asarray(doc["offsets"][m], dtype=np.float64) for m in MODALITIES},
                noise={m: float(doc["noise"][m]) for m in MODALITIES},
                n_train=int(doc["n_train"]),
                n_val=int(doc["n_val"]),
                n_test=int(doc["n_test"]),
                seed=int(doc.get("seed", 0)),
                name=str(doc.get("name", "custom")),
                label_weights=None if doc.get("label_weights") is None
                else np.asarray(doc["label_weights"], dtype=np.float64),
                label_noise=float(doc.get("label_noise", 0.0)),
                label_range=tuple(float(v) for v in doc.get("label_range", (-3.0, 3.0))),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed dataset spec: {exc}") from exc
        spec.validate()
        return spec


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def shifted_mixture_2d(raw_dim: int = 2, noise: float = 0.1, n_train: int = 800, n_val: int = 200,
                       n_test: int = 400, seed: int = 0, task: str = "classification",
                       scale: float = 1.0) -> DatasetSpec:
    """Default benchmark: four Gaussian classes in a 2-D latent, seen through
    per-modality rotation + scale + shift.

    For ``raw_dim > 2`` the rotated plane is embedded through a fixed
    orthonormal frame drawn from ``seed``.
    """
    if raw_dim < 2:
        raise SpecError("raw_dim must be >= 2")
    centers = scale * np.array([[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]])
    geometry = {  # angle, gain, shift
        "a": (math.pi / 3, 1.6, scale * np.array([3.0, -2.0])),
        "v": (-math.pi / 2, 0.7, scale * np.array([-2.5, -3.0])),
        "l": (0.0, 1.0, scale * np.array([0.0, 0.0])),
    }
    rng = make_rng(seed + 7919)
    maps, offsets = {}, {}
    for m in MODALITIES:
        angle, gain, shift = geometry[m]
        lin = gain * _rotation(angle)
        if raw_dim == 2:
            maps[m], offsets[m] = lin, shift.copy()
        else:
            frame, _ = np.linalg.qr(rng.standard_normal((raw_dim, 2)))
            maps[m] = frame @ lin
            offsets[m] = frame @ shift
    spec = DatasetSpec(
        task=task,
        latent_dim=2,
        centers=centers if task == "classification" else np.zeros((1, 2)),
        latent_std=scale * (0.8 if task == "classification" else 1.0),
        maps=maps,
        offsets=offsets,
        noise={m: noise for m in MODALITIES},
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        seed=seed,
        name=f"shifted-mixture-{raw_dim}d",
        label_weights=None if task == "classification" else np.array([1.0, 0.5]),
        label_noise=0.0 if task == "classification" else 0.1,
    )
    spec.validate()
    return spec


@dataclass
class Sample:
    U: dict[str, np.ndarray]
    y: float | int
    z: np.ndarray
    sample_id: int = 0


@dataclass
class Split:
    """Column-oriented store of one split."""

    name: str
    U: dict[str, np.ndarray]
    y: np.ndarray
    z: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.name, {m: u[idx] for m, u in self.U.items()}, self.y[idx], self.z[idx], self.ids[idx])

    def samples(self) -> list[Sample]:
        return [Sample({m: self.U[m][i] for m in self.U}, self.y[i].item(), self.z[i], int(self.ids[i]))
                for i in range(len(self))]


_SPLIT_STREAM = {"train": 0, "val": 1, "test": 2}


def _id_offset(spec: DatasetSpec, split: str) -> int:
    return {"train": 0, "val": spec.n_train, "test": spec.n_train + spec.n_val}[split]


def generate(spec: DatasetSpec, split: str) -> Split:
    spec.validate()
    n = spec.split_size(split)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed).spawn(3)[_SPLIT_STREAM[split]]))
    k = spec.latent_dim
    if spec.task == "classification":
        c = spec.n_classes
        y = np.arange(n) % c  # balanced within one sample
        y = y[rng.permutation(n)]
        z = spec.centers[y] + spec.latent_std * rng.standard_normal((n, k))
    else:
        z = spec.centers[0] + spec.latent_std * rng.standard_normal((n, k))
        lo, hi = spec.label_range
        y = np.clip(z @ spec.label_weights + spec.label_noise * rng.standard_normal(n), lo, hi)
    U = {}
    for m in MODALITIES:
        a = spec.maps[m]
        U[m] = z @ a.T + spec.offsets[m] + spec.noise[m] * rng.standard_normal((n, a.shape[0]))
    ids = np.arange(n) + _id_offset(spec, split)
    return Split(split, U, y, z, ids)


def generate_all(spec: DatasetSpec) -> dict[str, Split]:
    return {s: generate(spec, s) for s in SPLITS}


def oracle_transport(spec: DatasetSpec, u_src, src: str, tgt: str) -> np.ndarray:
    """Noise-free correspondence ``A_tgt pinv(A_src) (u - b_src) + b_tgt``.

    Accepts one vector or a matrix of row vectors.  Noisy sources are only
    approximately mapped (the oracle projects the noise too).
    """
    u = np.asarray(u_src, dtype=np.float64)
    if src == tgt:
        return u.copy()
    a_src = spec.maps[src]
    if np.linalg.matrix_rank(a_src) < a_src.shape[1]:
        raise SpecError(f"map for {src} is rank deficient")
    # pinv by normal equations: (A^T A)^{-1} A^T
    pinv = np.linalg.solve(a_src.T @ a_src, a_src.T)
    z = (u - spec.offsets[src]) @ pinv.T
    return z @ spec.maps[tgt].T + spec.offsets[tgt]


# --- files -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(spec: DatasetSpec, splits: dict[str, Split], out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    width = max(spec.raw_dims.values())
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "sample_id", "modality"] + [f"dim_{i}" for i in range(width)])
        for s in SPLITS:
            sp = splits[s]
            for i in range(len(sp)):
                for m in MODALITIES:
                    row = [_fmt(v) for v in sp.U[m][i]]
                    w.writerow([s, int(sp.ids[i]), m] + row + [""] * (width - len(row)))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "y"])
        for s in SPLITS:
            sp = splits[s]
            for i in range(len(sp)):
                y = sp.y[i]
                w.writerow([int(sp.ids[i]), int(y) if spec.task == "classification" else _fmt(y)])
    with open(out / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"z_{i}" for i in range(spec.latent_dim)])
        for s in SPLITS:
            sp = splits[s]
            for i in range(len(sp)):
                w.writerow([int(sp.ids[i])] + [_fmt(v) for v in sp.z[i]])


def read_dataset(path: Path) -> tuple[DatasetSpec, dict[str, Split]]:
    path = Path(path)
    for name in ("dataset_spec.json", "features.csv", "labels.csv"):
        if not (path / name).exists():
            raise FileNotFoundError(f"dataset file missing: {path / name}")
    spec = DatasetSpec.from_dict(json.loads((path / "dataset_spec.json").read_text()))
    dims = spec.raw_dims
    labels: dict[int, float] = {}
    with open(path / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            labels[int(row["sample_id"])] = float(row["y"])
    latents: dict[int, list[float]] = {}
    if (path / "latents.csv").exists():
        with open(path / "latents.csv", newline="") as fh:
            for row in csv.reader(fh):
                if row[0] == "sample_id":
                    continue
                latents[int(row[0])] = [float(v) for v in row[1:]]
    feats: dict[str, dict[str, dict[int, list[float]]]] = {s: {m: {} for m in MODALITIES} for s in SPLITS}
    order: dict[str, list[int]] = {s: [] for s in SPLITS}
    with open(path / "features.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            s, sid, m = row[0], int(row[1]), row[2]
            if s not in feats or m not in MODALITIES:
                raise ValueError(f"bad feature row: {row[:3]}")
            if sid not in feats[s]["a"] and sid not in feats[s]["v"] and sid not in feats[s]["l"]:
                order[s].append(sid)
            feats[s][m][sid] = [float(v) for v in row[3:3 + dims[m]]]
    splits = {}
    for s in SPLITS:
        ids = np.array(order[s], dtype=np.int64)
        U = {m: np.array([feats[s][m][i] for i in ids], dtype=np.float64).reshape(len(ids), dims[m]) for m in MODALITIES}
        y = np.array([labels[i] for i in ids])
        if spec.task == "classification":
            y = y.astype(np.int64)
        z = np.array([latents.get(int(i), [math.nan] * spec.latent_dim) for i in ids],
                     dtype=np.float64).reshape(len(ids), spec.latent_dim)
        splits[s] = Split(s, U, y, z, ids)
    return spec, splits
