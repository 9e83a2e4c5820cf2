"""Partial-label dataset types, validation and the on-disk directory format.

A dataset directory holds four files::

    meta.json        UTF-8 JSON, carries "plds_version": 1 plus m, d, q and
                     the generation record
    features.bin     float32 little-endian, m x d, row-major
    truth.bin        uint16 little-endian, length m
    candidates.bin   packed bitset rows, ceil(q/8) bytes each, LSB-first

Ground-truth labels live in the same artifact as the candidate sets, but the
trainer only ever receives ``features`` and ``candidates``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import DatasetFormatError, IntegrityError

PLDS_VERSION = 1

_STRUCTURAL_KEYS = ("plds_version", "m", "d", "q", "superclass_of", "class_names")


@dataclass(frozen=True)
class LabelSpace:
    q: int
    names: tuple[str, ...] | None = None
    superclass_of: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"label space needs at least 2 classes, got q={self.q}")
        if self.names is not None and len(self.names) != self.q:
            raise ValueError(f"names has length {len(self.names)}, expected {self.q}")
        if self.superclass_of is not None and len(self.superclass_of) != self.q:
            raise ValueError(
                f"superclass map covers {len(self.superclass_of)} classes, expected {self.q}"
            )


@dataclass(frozen=True, eq=False)
class PartialLabelDataset:
    """Features, held-out truth and per-sample candidate sets.

    ``candidates`` is an ``(m, q)`` boolean matrix; row ``i`` is the candidate
    set of sample ``i``. ``truth`` is read by candidate generation and
    evaluation code only.
    """

    features: np.ndarray
    truth: np.ndarray
    candidates: np.ndarray
    label_space: LabelSpace
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def q(self) -> int:
        return self.label_space.q

    def subset(self, index) -> "PartialLabelDataset":
        index = np.asarray(index)
        return PartialLabelDataset(
            features=self.features[index],
            truth=self.truth[index],
            candidates=self.candidates[index],
            label_space=self.label_space,
            meta=dict(self.meta),
        )


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    bad_rows: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "dataset valid"
        return "\n".join(self.errors)


@dataclass(frozen=True)
class CandidateStats:
    avg_cls: float
    histogram: dict[int, int]


def validate_dataset(ds: PartialLabelDataset) -> ValidationReport:
    """Collect every invariant violation of ``ds`` without raising."""
    report = ValidationReport()
    X, y, S = np.asarray(ds.features), np.asarray(ds.truth), np.asarray(ds.candidates)
    q = ds.label_space.q

    if X.ndim != 2:
        report.errors.append(f"features must be 2-d, got shape {X.shape}")
        return report
    m = X.shape[0]
    if y.shape != (m,):
        report.errors.append(f"truth shape {y.shape} does not match m={m}")
    if S.shape != (m, q):
        report.errors.append(f"candidates shape {S.shape} does not match (m, q)=({m}, {q})")
    if report.errors:
        return report
    if not np.all(np.isfinite(X)):
        report.errors.append("features contain non-finite values")

    out_of_range = np.flatnonzero((y < 0) | (y >= q))
    for i in out_of_range:
        report.errors.append(f"row {i}: truth {y[i]} outside [0, {q})")
        report.bad_rows.append(int(i))

    S = S.astype(bool)
    for i in np.flatnonzero(~S.any(axis=1)):
        report.errors.append(f"row {i}: empty candidate set")
        report.bad_rows.append(int(i))

    valid = np.flatnonzero((y >= 0) & (y < q))
    missing = valid[~S[valid, y[valid]]]
    for i in missing:
        if S[i].any():
            report.errors.append(f"row {i}: truth label {y[i]} missing from candidate set")
            report.bad_rows.append(int(i))
    report.bad_rows.sort()
    return report


def candidate_stats(ds_or_candidates) -> CandidateStats:
    S = ds_or_candidates.candidates if isinstance(ds_or_candidates, PartialLabelDataset) else ds_or_candidates
    sizes = np.asarray(S, dtype=bool).sum(axis=1)
    values, counts = np.unique(sizes, return_counts=True)
    return CandidateStats(
        avg_cls=float(sizes.mean()),
        histogram={int(v): int(c) for v, c in zip(values, counts)},
    )


def pack_candidates(candidates: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(candidates, dtype=bool), axis=1, bitorder="little")


def unpack_candidates(packed: np.ndarray, q: int) -> np.ndarray:
    return np.unpackbits(packed, axis=1, count=q, bitorder="little").astype(bool)


def save_dataset(ds: PartialLabelDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m, d, q = ds.m, ds.d, ds.q

    meta = {"plds_version": PLDS_VERSION, "m": m, "d": d, "q": q}
    meta.update(ds.meta)
    if ds.label_space.superclass_of is not None:
        meta["superclass_of"] = list(ds.label_space.superclass_of)
    if ds.label_space.names is not None:
        meta["class_names"] = list(ds.label_space.names)

    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    np.ascontiguousarray(ds.features, dtype="<f4").tofile(path / "features.bin")
    if q > np.iinfo(np.uint16).max + 1:
        raise ValueError(f"q={q} does not fit the uint16 truth encoding")
    np.ascontiguousarray(ds.truth, dtype="<u2").tofile(path / "truth.bin")
    pack_candidates(ds.candidates).tofile(path / "candidates.bin")
    return path


def _read_blob(path: Path, dtype, count: int, what: str) -> np.ndarray:
    if not path.exists():
        raise IntegrityError(f"{what} payload missing: {path}")
    itemsize = np.dtype(dtype).itemsize
    size = os.path.getsize(path)
    if size != count * itemsize:
        raise IntegrityError(
            f"{what} payload has {size} bytes, meta.json implies {count * itemsize}"
        )
    return np.fromfile(path, dtype=dtype, count=count)


def load_dataset(path) -> PartialLabelDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"no meta.json in {path}")
    text = meta_path.read_text(encoding="utf-8")
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"corrupt meta.json header: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(meta, dict) or "plds_version" not in meta:
        raise DatasetFormatError("meta.json lacks the plds_version magic field", offset=0)
    if meta["plds_version"] != PLDS_VERSION:
        raise DatasetFormatError(f"unsupported plds_version {meta['plds_version']!r}")
    try:
        m, d, q = int(meta["m"]), int(meta["d"]), int(meta["q"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"meta.json missing dimension field: {exc}") from exc

    features = _read_blob(path / "features.bin", "<f4", m * d, "features").reshape(m, d)
    truth = _read_blob(path / "truth.bin", "<u2", m, "truth").astype(np.int64)
    row_bytes = (q + 7) // 8
    packed = _read_blob(path / "candidates.bin", np.uint8, m * row_bytes, "candidates")
    candidates = unpack_candidates(packed.reshape(m, row_bytes), q)

    names = meta.get("class_names")
    supers = meta.get("superclass_of")
    label_space = LabelSpace(
        q=q,
        names=tuple(names) if names is not None else None,
        superclass_of=tuple(int(s) for s in supers) if supers is not None else None,
    )
    extra = {k: v for k, v in meta.items() if k not in _STRUCTURAL_KEYS}
    return PartialLabelDataset(
        features=features.astype(np.float32),
        truth=truth,
        candidates=candidates,
        label_space=label_space,
        meta=extra,
    )


def check_confidence(T: np.ndarray, candidates: np.ndarray, atol: float = 1e-9) -> list[str]:
    """Return violations of the confidence-matrix invariants (empty when valid)."""
    problems = []
    T = np.asarray(T)
    S = np.asarray(candidates, dtype=bool)
    if T.shape != S.shape:
        return [f"confidence shape {T.shape} != candidates shape {S.shape}"]
    if np.any(T < 0):
        problems.append("negative confidence entries")
    sums = T.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        problems.append(f"rows {bad[:10].tolist()} do not sum to 1")
    if np.any(T[~S] != 0):
        problems.append("non-zero confidence outside candidate sets")
    return problems
