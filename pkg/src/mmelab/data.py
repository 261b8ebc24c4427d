"""Synthetic domain-shift tasks, the few-shot target split and the CSV dataset format.

File layout (UTF-8, LF, header row)::

    x0,...,x{d-1},label,domain,split

``domain`` is ``source`` or ``target``; ``split`` is ``train`` for source rows and
one of ``labeled``, ``val``, ``unlabeled`` for target rows. Unlabeled rows carry
label ``-1``; their true labels live in a sibling ``<stem>.truth.csv`` with
header ``row,label`` where ``row`` is the 0-based data-row index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

N_VAL_PER_CLASS = 3
TASKS = ("gauss-shift", "two-moons-shift")
SPLITS = ("train", "labeled", "val", "unlabeled")


@dataclass
class ShiftTaskSpec:
    """A class-conditional source distribution and its rotated, translated target copy.

    ``shift`` is a magnitude applied along the diagonal of the first two input
    dimensions, or an explicit vector of length ``d``. ``noise_sigma`` is extra
    isotropic noise added to target samples only; ``class_std`` is the spread of
    each class in both domains.
    """

    task: str = "gauss-shift"
    K: int = 4
    d: int = 2
    n_source_per_class: int = 200
    n_target_per_class: int = 100
    rotation: float = math.pi / 6
    shift: float | list[float] = 1.5
    noise_sigma: float = 0.1
    class_std: float = 0.12
    radius: float = 0.5
    shots: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task == "two-moons-shift" and self.K != 2:
            raise ConfigError("two-moons-shift has exactly two classes")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.d < 2:
            raise ConfigError("d must be at least 2 (rotation acts on the first two dims)")
        if self.shots < 1:
            raise ConfigError("shots must be at least 1")
        need = self.shots + N_VAL_PER_CLASS + 1
        if self.n_target_per_class < need:
            raise ConfigError(f"n_target_per_class={self.n_target_per_class} < shots + {N_VAL_PER_CLASS} + 1 = {need}")
        if self.n_source_per_class < 1:
            raise ConfigError("n_source_per_class must be positive")
        if not math.isfinite(self.rotation) or self.noise_sigma < 0 or self.class_std < 0:
            raise ConfigError("rotation must be finite and noise/std nonnegative")
        self.shift_vector()

    def shift_vector(self) -> np.ndarray:
        if np.ndim(self.shift) == 0:
            t = np.zeros(self.d)
            t[:2] = float(self.shift) / math.sqrt(2.0)
            return t
        t = np.asarray(self.shift, dtype=np.float64)
        if t.shape != (self.d,):
            raise ConfigError(f"shift vector has length {t.size}, expected {self.d}")
        return t

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SsdaDataset:
    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_y: np.ndarray | None
    K: int
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.source_x.shape[1]

    @property
    def target_test(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Evaluation set: the unlabeled target pool with its held-out labels."""
        return self.unlabeled_x, self.unlabeled_y

    def __eq__(self, other):
        if not isinstance(other, SsdaDataset) or self.K != other.K:
            return False
        names = ("source_x", "source_y", "labeled_x", "labeled_y", "val_x", "val_y", "unlabeled_x")
        if not all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names):
            return False
        if (self.unlabeled_y is None) != (other.unlabeled_y is None):
            return False
        return self.unlabeled_y is None or np.array_equal(self.unlabeled_y, other.unlabeled_y)

    def counts(self) -> dict:
        return {
            "source": len(self.source_y),
            "labeled": len(self.labeled_y),
            "val": len(self.val_y),
            "unlabeled": len(self.unlabeled_x),
        }


# -- generators ---------------------------------------------------------------


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in the plane of the first two coordinates."""
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def class_means(spec: ShiftTaskSpec) -> np.ndarray:
    """Source class means for gauss-shift: evenly spaced on a circle around the origin."""
    mu = np.zeros((spec.K, spec.d))
    angles = 2 * np.pi * np.arange(spec.K) / spec.K
    mu[:, 0] = spec.radius * np.cos(angles)
    mu[:, 1] = spec.radius * np.sin(angles)
    return mu


def _sample_gauss(rng, spec: ShiftTaskSpec, n: int):
    mu = class_means(spec)
    y = np.repeat(np.arange(spec.K), n)
    x = mu[y] + spec.class_std * rng.standard_normal((len(y), spec.d))
    return x, y


def _sample_moons(rng, spec: ShiftTaskSpec, n: int):
    t = rng.uniform(0.0, np.pi, size=2 * n)
    y = np.repeat(np.arange(2), n)
    x = np.zeros((2 * n, spec.d))
    upper = y == 0
    x[upper, 0] = np.cos(t[upper])
    x[upper, 1] = np.sin(t[upper])
    x[~upper, 0] = 1.0 - np.cos(t[~upper])
    x[~upper, 1] = 0.5 - np.sin(t[~upper])
    x[:, 0] -= 0.5
    x[:, 1] -= 0.25
    x[:, :2] *= spec.radius / 2.0
    x += spec.class_std * rng.standard_normal(x.shape)
    return x, y


def sample_domains(spec: ShiftTaskSpec):
    """Draw (source_x, source_y, target_x, target_y) with per-class counts from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sampler = _sample_gauss if spec.task == "gauss-shift" else _sample_moons
    xs, ys = sampler(rng, spec, spec.n_source_per_class)
    xt, yt = sampler(rng, spec, spec.n_target_per_class)
    R = rotation_matrix(spec.d, spec.rotation)
    xt = xt @ R.T + spec.shift_vector() + spec.noise_sigma * rng.standard_normal(xt.shape)
    return xs, ys, xt, yt


def target_means(spec: ShiftTaskSpec) -> np.ndarray:
    """Closed-form per-class target means for gauss-shift."""
    R = rotation_matrix(spec.d, spec.rotation)
    return class_means(spec) @ R.T + spec.shift_vector()


@dataclass
class Partitions:
    labeled: np.ndarray
    val: np.ndarray
    unlabeled: np.ndarray


def split_ssda(y, shots: int, seed: int, n_val: int = N_VAL_PER_CLASS) -> Partitions:
    """Per class: ``shots`` labeled, ``n_val`` validation, the rest unlabeled.

    Picks are uniform without replacement. Returned arrays index into ``y`` and
    are sorted, so the partition (not the draw order) is what the seed decides.
    """
    y = np.asarray(y)
    if shots < 1:
        raise ConfigError("shots must be at least 1")
    rng = np.random.default_rng(seed)
    lab, val, unl = [], [], []
    for k in np.unique(y):
        idx = np.flatnonzero(y == k)
        if len(idx) < shots + n_val + 1:
            raise ConfigError(f"class {k} has {len(idx)} examples; need at least {shots + n_val + 1}")
        perm = rng.permutation(idx)
        lab.append(perm[:shots])
        val.append(perm[shots : shots + n_val])
        unl.append(perm[shots + n_val :])
    return Partitions(*(np.sort(np.concatenate(p)) for p in (lab, val, unl)))


def generate(spec: ShiftTaskSpec) -> SsdaDataset:
    xs, ys, xt, yt = sample_domains(spec)
    parts = split_ssda(yt, spec.shots, seed=spec.seed + 1)
    return SsdaDataset(
        source_x=xs,
        source_y=ys,
        labeled_x=xt[parts.labeled],
        labeled_y=yt[parts.labeled],
        val_x=xt[parts.val],
        val_y=yt[parts.val],
        unlabeled_x=xt[parts.unlabeled],
        unlabeled_y=yt[parts.unlabeled],
        K=spec.K,
        meta=spec.to_dict(),
    )


# -- CSV I/O ------------------------------------------------------------------


def truth_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".truth.csv")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: SsdaDataset, path) -> None:
    path = Path(path)
    d = ds.d
    header = [f"x{i}" for i in range(d)] + ["label", "domain", "split"]
    blocks = [
        (ds.source_x, ds.source_y, "source", "train"),
        (ds.labeled_x, ds.labeled_y, "target", "labeled"),
        (ds.val_x, ds.val_y, "target", "val"),
        (ds.unlabeled_x, None, "target", "unlabeled"),
    ]
    lines = [",".join(header)]
    truth = ["row,label"]
    row = 0
    for x, y, domain, split in blocks:
        for i in range(len(x)):
            label = int(y[i]) if y is not None else -1
            lines.append(",".join([_fmt(v) for v in x[i]] + [str(label), domain, split]))
            if split == "unlabeled" and ds.unlabeled_y is not None:
                truth.append(f"{row},{int(ds.unlabeled_y[i])}")
            row += 1
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tp = truth_path(path)
    if ds.unlabeled_y is not None:
        tp.write_text("\n".join(truth) + "\n", encoding="utf-8")
    elif tp.exists():
        tp.unlink()


def _parse_float(s: str, line: int) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"not a number: {s!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {s!r}", line)
    return v


def _parse_int(s: str, line: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise ParseError(f"not an integer label: {s!r}", line) from None


def read_dataset(path) -> SsdaDataset:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 4 or header[-3:] != ["label", "domain", "split"]:
            raise ParseError("header must end with label,domain,split", 1)
        d = len(header) - 3
        if header[:d] != [f"x{i}" for i in range(d)]:
            raise ParseError(f"feature columns must be x0..x{d - 1}", 1)
        xs: dict[str, list] = {s: [] for s in SPLITS}
        ys: dict[str, list] = {s: [] for s in SPLITS}
        unlabeled_rows: list[int] = []
        row = 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 3:
                raise ParseError(f"expected {d + 3} fields, got {len(rec)}", lineno)
            x = [_parse_float(v, lineno) for v in rec[:d]]
            label = _parse_int(rec[d], lineno)
            domain, split = rec[d + 1], rec[d + 2]
            if split not in SPLITS:
                raise ParseError(f"unknown split tag {split!r}", lineno)
            if domain not in ("source", "target"):
                raise ParseError(f"unknown domain {domain!r}", lineno)
            if (domain == "source") != (split == "train"):
                raise ParseError(f"split {split!r} is not valid for domain {domain!r}", lineno)
            if split == "unlabeled":
                unlabeled_rows.append(row)
            elif label < 0:
                raise ParseError(f"label {label} only allowed on unlabeled rows", lineno)
            xs[split].append(x)
            ys[split].append(label)
            row += 1
    truth = _read_truth(truth_path(path), unlabeled_rows)

    seen = set()
    for s in ("train", "labeled", "val"):
        seen.update(ys[s])
    if truth is not None:
        seen.update(truth.tolist())
    if not seen:
        raise ParseError("no labeled rows", None)
    K = max(seen) + 1
    if seen != set(range(K)):
        raise ParseError(f"labels are not contiguous from 0: {sorted(seen)}", None)

    def arr(s):
        return np.array(xs[s], dtype=np.float64).reshape(-1, d)

    return SsdaDataset(
        source_x=arr("train"),
        source_y=np.array(ys["train"], dtype=np.int64),
        labeled_x=arr("labeled"),
        labeled_y=np.array(ys["labeled"], dtype=np.int64),
        val_x=arr("val"),
        val_y=np.array(ys["val"], dtype=np.int64),
        unlabeled_x=arr("unlabeled"),
        unlabeled_y=truth,
        K=K,
    )


def _read_truth(path: Path, unlabeled_rows: list[int]) -> np.ndarray | None:
    if not path.exists():
        return None
    by_row: dict[int, int] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["row", "label"]:
            raise ParseError(f"{path.name}: header must be row,label", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(f"{path.name}: expected 2 fields", lineno)
            r, lab = _parse_int(rec[0], lineno), _parse_int(rec[1], lineno)
            if lab < 0:
                raise ParseError(f"{path.name}: negative truth label", lineno)
            by_row[r] = lab
    if set(by_row) != set(unlabeled_rows):
        raise ParseError(f"{path.name}: rows do not match the unlabeled rows of the dataset", None)
    return np.array([by_row[r] for r in unlabeled_rows], dtype=np.int64)
