"""Persistent gallery of enrolled cattle embeddings.

One embedding per animal (enrollment is one-shot), a squared-L2 linear
scan for search, and a line-oriented JSON file for persistence: a header
line with dimension, metric tag and decision threshold, then one record
per line. Writes go through a temp file and an atomic rename, so readers
never see a partial gallery, and all mutation is serialized by a store
lock. Re-enrolling an id requires deleting it first.
"""

import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .embedder import squared_l2
from .errors import (DataError, DuplicateId, EmptyGallery, FormatError,
                     NotEnrolled, SpecError)

FORMAT_VERSION = 1
METRIC = "sql2"
DEFAULT_DIM = 128
METADATA_KEYS = ("breed", "gender", "date_of_birth", "disease_history",
                 "vaccine_history")


def utc_now():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class EnrollmentRecord:
    cattle_id: str
    embedding: np.ndarray
    metadata: dict = field(default_factory=dict)
    enrolled_at: str = field(default_factory=utc_now)

    def __post_init__(self):
        if not isinstance(self.cattle_id, str) or not self.cattle_id:
            raise SpecError("cattle_id must be a non-empty string")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 1 or len(self.embedding) == 0:
            raise SpecError(
                f"embedding must be a flat vector, got {self.embedding.shape}")
        if not np.all(np.isfinite(self.embedding)):
            raise SpecError("embedding has non-finite entries")
        if not isinstance(self.metadata, dict) or \
                any(not isinstance(k, str) for k in self.metadata):
            raise SpecError("metadata must be a string-keyed map")

    def __eq__(self, other):
        if not isinstance(other, EnrollmentRecord):
            return NotImplemented
        return (self.cattle_id == other.cattle_id
                and np.array_equal(self.embedding, other.embedding)
                and self.metadata == other.metadata
                and self.enrolled_at == other.enrolled_at)


@dataclass
class VerifyResult:
    match: bool
    distance: float
    threshold: float


@dataclass
class Candidate:
    cattle_id: str
    distance: float


@dataclass
class IdentifyResult:
    candidates: list
    match: bool


class GalleryStore:
    """In-memory gallery, optionally bound to a file that every mutation
    rewrites atomically."""

    def __init__(self, dim=DEFAULT_DIM, threshold=1.0, path=None):
        if int(dim) < 1:
            raise SpecError(f"dimension must be positive, got {dim}")
        if not threshold > 0.0:
            raise SpecError(f"threshold must be positive, got {threshold}")
        self.dim = int(dim)
        self.threshold = float(threshold)
        self.metric = METRIC
        self.path = Path(path) if path is not None else None
        self.records = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, GalleryStore):
            return NotImplemented
        return (self.dim == other.dim and self.threshold == other.threshold
                and self.records == other.records)

    def ids(self):
        return [r.cattle_id for r in self.records]

    def get(self, cattle_id):
        for record in self.records:
            if record.cattle_id == cattle_id:
                return record
        raise NotEnrolled(f"{cattle_id!r} is not enrolled")

    def enroll(self, record):
        if record.embedding.shape != (self.dim,):
            raise SpecError(f"embedding dimension {record.embedding.shape[0]}"
                            f" does not match gallery dimension {self.dim}")
        with self._lock:
            if any(r.cattle_id == record.cattle_id for r in self.records):
                raise DuplicateId(f"{record.cattle_id!r} already enrolled")
            self.records.append(record)
            self._persist_locked()
        return self

    def delete(self, cattle_id):
        with self._lock:
            for i, record in enumerate(self.records):
                if record.cattle_id == cattle_id:
                    del self.records[i]
                    self._persist_locked()
                    return record
        raise NotEnrolled(f"{cattle_id!r} is not enrolled")

    def _check_probe(self, probe):
        probe = np.asarray(probe, dtype=np.float64)
        if probe.shape != (self.dim,):
            raise SpecError(f"probe dimension {probe.shape} does not match "
                            f"gallery dimension {self.dim}")
        return probe

    def verify(self, probe, claimed_id):
        probe = self._check_probe(probe)
        record = self.get(claimed_id)
        distance = squared_l2(probe, record.embedding)
        return VerifyResult(match=distance <= self.threshold,
                            distance=distance, threshold=self.threshold)

    def identify(self, probe, k=5):
        if k < 1:
            raise SpecError(f"k must be at least 1, got {k}")
        probe = self._check_probe(probe)
        records = self.records
        if not records:
            raise EmptyGallery("no cattle enrolled")
        scored = sorted(((squared_l2(probe, r.embedding), r.cattle_id)
                         for r in records), key=lambda e: (e[0], e[1]))
        top = [Candidate(cattle_id=cid, distance=d)
               for d, cid in scored[:min(k, len(scored))]]
        return IdentifyResult(candidates=top,
                              match=top[0].distance <= self.threshold)

    def _persist_locked(self):
        if self.path is not None:
            _write_atomic(self.path, self._serialize())

    def _serialize(self):
        lines = [json.dumps({"version": FORMAT_VERSION, "dim": self.dim,
                             "metric": self.metric,
                             "threshold": self.threshold}, sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({"id": r.cattle_id,
                                     "vec": r.embedding.tolist(),
                                     "meta": r.metadata,
                                     "ts": r.enrolled_at}, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def save(self, path=None):
        path = Path(path) if path is not None else self.path
        if path is None:
            raise SpecError("no path bound to this gallery")
        with self._lock:
            _write_atomic(path, self._serialize())
        return path


def _write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(line):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"line 1: bad header JSON ({e.msg})") from e
    if not isinstance(header, dict):
        raise FormatError("line 1: header must be a JSON object")
    missing = {"version", "dim", "metric", "threshold"} - set(header)
    if missing:
        raise FormatError(f"line 1: header missing {sorted(missing)}")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"line 1: unsupported version {header['version']}")
    if header["metric"] != METRIC:
        raise FormatError(f"line 1: unsupported metric {header['metric']!r}")
    return header


def load_gallery(path):
    """Parse a gallery file; any corruption names the offending record."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no gallery at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("line 1: empty file, header expected")
    header = _parse_header(lines[0])
    try:
        store = GalleryStore(dim=header["dim"], threshold=header["threshold"])
    except SpecError as e:
        raise FormatError(f"line 1: {e}") from e

    seen = set()
    for idx, line in enumerate(lines[1:], start=1):
        where = f"record {idx} (line {idx + 1})"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{where}: bad JSON ({e.msg})") from e
        if not isinstance(obj, dict) or \
                {"id", "vec", "meta", "ts"} - set(obj):
            raise FormatError(f"{where}: needs id, vec, meta, ts")
        if obj["id"] in seen:
            raise FormatError(f"{where}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        try:
            record = EnrollmentRecord(cattle_id=obj["id"],
                                      embedding=obj["vec"],
                                      metadata=obj["meta"],
                                      enrolled_at=obj["ts"])
        except (SpecError, TypeError, ValueError) as e:
            raise FormatError(f"{where}: {e}") from e
        if record.embedding.shape != (store.dim,):
            raise FormatError(f"{where}: dimension "
                              f"{record.embedding.shape[0]} does not match "
                              f"header dim {store.dim}")
        store.records.append(record)
    store.path = path
    return store
