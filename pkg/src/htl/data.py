"""Labelled feature datasets: delimited-file I/O and a synthetic generator.

File format: one sample per line, ``label,x_1,...,x_d``. An optional header
line is recognised by a first field that is not an integer. Labels may be any
integers; they are re-indexed to ``0..C-1`` in ascending order of the original
value and the mapping is kept on the dataset.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    # original label -> contiguous class id
    label_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels):
            present = np.unique(self.labels)
            if present[0] != 0 or present[-1] != len(present) - 1:
                raise ValueError("labels must be contiguous from 0")
        if not self.label_mapping:
            self.label_mapping = {int(c): int(c) for c in np.unique(self.labels)}

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[indices], self.labels[indices], split or self.split, dict(self.label_mapping)
        )


def _is_int(token):
    try:
        int(token)
    except ValueError:
        return False
    return True


def load_dataset(path, delimiter=",", split="train"):
    path = Path(path)
    lines = path.read_text().splitlines()
    rows = [(no, line) for no, line in enumerate(lines, start=1) if line.strip()]
    if rows and not _is_int(rows[0][1].split(delimiter)[0].strip()):
        rows = rows[1:]
    if not rows:
        raise DatasetFormatError(f"{path}: no samples")

    raw_labels, values = [], []
    width = None
    for no, line in rows:
        fields = [f.strip() for f in line.split(delimiter)]
        if not _is_int(fields[0]):
            raise DatasetFormatError(f"{path}:{no}: label {fields[0]!r} is not an integer")
        if width is None:
            width = len(fields)
            if width < 2:
                raise DatasetFormatError(f"{path}:{no}: row has no feature values")
        elif len(fields) != width:
            raise DatasetFormatError(f"{path}:{no}: expected {width} fields, found {len(fields)}")
        try:
            vec = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{no}: non-numeric feature ({exc})") from None
        if not all(np.isfinite(vec)):
            raise DatasetFormatError(f"{path}:{no}: non-finite feature value")
        raw_labels.append(int(fields[0]))
        values.append(vec)

    originals = sorted(set(raw_labels))
    mapping = {orig: new for new, orig in enumerate(originals)}
    labels = np.array([mapping[l] for l in raw_labels], dtype=np.int64)
    return LabeledDataset(np.array(values), labels, split, mapping)


def write_dataset(dataset, path, delimiter=",", header=False, original_labels=False):
    inverse = {v: k for k, v in dataset.label_mapping.items()}
    out = []
    if header:
        out.append(delimiter.join(["label"] + [f"x{i}" for i in range(dataset.dim)]))
    for label, vec in zip(dataset.labels, dataset.features):
        lab = inverse.get(int(label), int(label)) if original_labels else int(label)
        out.append(delimiter.join([str(lab)] + [repr(float(x)) for x in vec]))
    Path(path).write_text("\n".join(out) + "\n")


@dataclass(frozen=True)
class SyntheticSpec:
    num_superclasses: int = 4
    subclasses_per_super: int = 5
    samples_per_class: int = 30
    input_dim: int = 16
    super_separation: float = 4.0
    sub_separation: float = 1.5
    noise_scale: float = 0.3
    seed: int = 0

    def validate(self):
        if min(self.num_superclasses, self.subclasses_per_super, self.samples_per_class, self.input_dim) < 1:
            raise ValueError("counts and input_dim must be positive")
        if self.super_separation <= 0 or self.sub_separation <= 0:
            raise ValueError("separations must be positive")
        if not 0 <= self.noise_scale < self.sub_separation:
            raise ValueError("noise_scale must be non-negative and below sub_separation")

    @property
    def num_classes(self):
        return self.num_superclasses * self.subclasses_per_super


def _unit(rng, dim):
    while True:
        v = rng.normal(size=dim)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def generate_synthetic(spec, max_tries=10_000):
    """Gaussian blobs with a planted two-level class hierarchy.

    Superclass centres sit on a sphere of radius ``super_separation`` and are
    redrawn until every pair is at least ``super_separation`` apart. Each
    subclass centre is exactly ``sub_separation`` from its superclass centre,
    and samples add isotropic Gaussian noise with std ``noise_scale``. Class
    ``k`` is superclass ``k // subclasses_per_super``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centres = []
    for _ in range(spec.num_superclasses):
        for _ in range(max_tries):
            c = spec.super_separation * _unit(rng, spec.input_dim)
            if all(np.linalg.norm(c - o) >= spec.super_separation for o in centres):
                centres.append(c)
                break
        else:
            raise ValueError(
                f"cannot place {spec.num_superclasses} superclasses {spec.super_separation} apart "
                f"in {spec.input_dim} dimensions"
            )

    features, labels = [], []
    for s, centre in enumerate(centres):
        for j in range(spec.subclasses_per_super):
            sub_centre = centre + spec.sub_separation * _unit(rng, spec.input_dim)
            noise = spec.noise_scale * rng.normal(size=(spec.samples_per_class, spec.input_dim))
            features.append(sub_centre + noise)
            labels.append(np.full(spec.samples_per_class, s * spec.subclasses_per_super + j))
    return LabeledDataset(np.concatenate(features), np.concatenate(labels), "train")


def superclass_of(spec, labels):
    return np.asarray(labels) // spec.subclasses_per_super


def write_synthetic(spec, path):
    """Write the generated dataset plus a ``<path>.meta.json`` sidecar."""
    dataset = generate_synthetic(spec)
    write_dataset(dataset, path)
    meta = {"generator": "synthetic-hierarchical", "spec": asdict(spec), "num_samples": len(dataset)}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return dataset


def stratified_split(dataset, holdout_per_class, seed=0):
    """Hold out ``holdout_per_class`` samples of every class; returns (train, held_out)."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if len(idx) <= holdout_per_class:
            raise ValueError(f"class {c} has {len(idx)} samples, cannot hold out {holdout_per_class}")
        test_idx.extend(idx[:holdout_per_class])
        train_idx.extend(idx[holdout_per_class:])
    return dataset.subset(np.sort(train_idx), "train"), dataset.subset(np.sort(test_idx), "test")
