"""File formats: JSONL frames, JSONL object lists, JSON params and CSV tables.

Every JSONL file starts with a header line ``{"schema": ..., "version": ...}``
that is checked on read. Floats are written with ``repr`` precision, so a
write followed by a read reproduces every value bit for bit. Writers refuse to
replace an existing file unless ``force`` is set.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import FrameObservations
from .model import AnchorObservation, ModelParams, MotionParams, ObjectState

SCHEMA_VERSION = 1
FRAMES_SCHEMA = "bayes_d2t.frames"
OBJECT_SCHEMAS = {"truth": "bayes_d2t.truth", "tracks": "bayes_d2t.tracks"}
PARAMS_SCHEMA = "bayes_d2t.params"


class FormatError(ValueError):
    """Malformed input file; carries the path and 1-based line number."""

    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        self.detail = message
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")

    def to_record(self) -> dict:
        return {"error": "parse_error", "path": self.path, "line": self.line, "message": self.detail}


@dataclass(frozen=True, eq=False)
class ObjectRecord:
    """One serialized object: ground truth or a tracker estimate."""

    track_id: int
    box: np.ndarray
    class_id: int
    confidence: float = 1.0
    cov: Optional[np.ndarray] = None  # 4x4 location covariance, if known
    class_probs: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, ObjectRecord):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.track_id == other.track_id
            and np.array_equal(self.box, other.box)
            and self.class_id == other.class_id
            and self.confidence == other.confidence
            and same(self.cov, other.cov)
            and same(self.class_probs, other.class_probs)
        )

    def to_state(self) -> ObjectState:
        return ObjectState(self.box, self.class_id, self.track_id)

    @classmethod
    def from_state(cls, obj: ObjectState, index: int = 0) -> "ObjectRecord":
        tid = obj.track_id if obj.track_id is not None else index
        return cls(int(tid), np.array(obj.box, dtype=np.float64), obj.class_id, 1.0)


ObjectFrames = List[Tuple[int, List[ObjectRecord]]]


# ---------------------------------------------------------------------------
# low-level helpers
# ---------------------------------------------------------------------------


def _open_for_write(path: Path, force: bool):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    try:
        return open(path, "w" if force else "x", encoding="utf-8", newline="")
    except FileExistsError:
        raise FileExistsError(f"{path}: refusing to overwrite existing file (use --force)") from None
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _floats(values) -> List[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def _read_lines(path: Path, schema: str):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise FormatError(path, 1, "missing schema header")
    header = _parse_json(path, 1, lines[0])
    if not isinstance(header, dict) or header.get("schema") != schema:
        raise FormatError(path, 1, f"expected schema {schema!r}, got {header!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise FormatError(path, 1, f"unsupported schema version {header.get('version')!r}")
    for number, line in enumerate(lines[1:], start=2):
        if line.strip():
            yield number, _parse_json(path, number, line)


def _parse_json(path, number, line):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(path, number, f"invalid JSON: {exc.msg}") from None


def _field(path, number, record, key, kind=None):
    if not isinstance(record, dict) or key not in record:
        raise FormatError(path, number, f"missing field {key!r}")
    value = record[key]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(path, number, f"field {key!r} has the wrong type")
    return value


def _vector(path, number, value, size, name):
    if not isinstance(value, list) or (size is not None and len(value) != size):
        raise FormatError(path, number, f"{name} must be a list of {size} numbers")
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(path, number, f"{name} must contain numbers") from None
    return arr


def _frame_index(path, number, record):
    t = _field(path, number, record, "frame")
    if isinstance(t, bool) or not isinstance(t, int) or t < 0:
        raise FormatError(path, number, "frame must be a non-negative integer")
    return t


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def write_frames(path, frames: Sequence[FrameObservations], force: bool = False) -> None:
    with _open_for_write(path, force) as fh:
        fh.write(_dump({"schema": FRAMES_SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for frame in frames:
            anchors = [
                {"box": _floats(a.box), "e": float(a.appearance), "k": _floats(a.class_scores)}
                for a in frame.anchors
            ]
            fh.write(_dump({"frame": frame.frame_index, "anchors": anchors}) + "\n")


def read_frames(path) -> List[FrameObservations]:
    frames = []
    for number, record in _read_lines(path, FRAMES_SCHEMA):
        t = _frame_index(path, number, record)
        anchors = []
        for item in _field(path, number, record, "anchors", list):
            box = _vector(path, number, _field(path, number, item, "box"), 4, "box")
            e = _field(path, number, item, "e")
            k = _vector(path, number, _field(path, number, item, "k"), None, "k")
            try:
                anchors.append(AnchorObservation(box, e, k))
            except (TypeError, ValueError) as exc:
                raise FormatError(path, number, str(exc)) from None
        frames.append(FrameObservations(t, anchors))
    return frames


# ---------------------------------------------------------------------------
# truth and tracks
# ---------------------------------------------------------------------------


def write_objects(path, frames: Iterable[Tuple[int, Sequence[ObjectRecord]]], kind: str = "tracks",
                  force: bool = False) -> None:
    if kind not in OBJECT_SCHEMAS:
        raise ValueError(f"kind must be one of {sorted(OBJECT_SCHEMAS)}")
    with _open_for_write(path, force) as fh:
        fh.write(_dump({"schema": OBJECT_SCHEMAS[kind], "version": SCHEMA_VERSION}) + "\n")
        for t, records in frames:
            objects = []
            for r in records:
                item = {"id": int(r.track_id), "box": _floats(r.box), "class": int(r.class_id),
                        "conf": float(r.confidence)}
                if r.cov is not None:
                    item["cov"] = _floats(r.cov)
                if r.class_probs is not None:
                    item["probs"] = _floats(r.class_probs)
                objects.append(item)
            fh.write(_dump({"frame": int(t), "objects": objects}) + "\n")


def read_objects(path, kind: Optional[str] = None) -> ObjectFrames:
    """Read a truth or tracks file; ``kind=None`` accepts either schema."""
    path = Path(path)
    kinds = [kind] if kind is not None else list(OBJECT_SCHEMAS)
    errors = []
    for k in kinds:
        try:
            return _read_objects(path, OBJECT_SCHEMAS[k])
        except FormatError as exc:
            if exc.line != 1:
                raise
            errors.append(exc)
    raise errors[-1]


def _read_objects(path, schema) -> ObjectFrames:
    out: ObjectFrames = []
    for number, record in _read_lines(path, schema):
        t = _frame_index(path, number, record)
        objs = []
        for item in _field(path, number, record, "objects", list):
            tid = _field(path, number, item, "id")
            cls = _field(path, number, item, "class")
            if isinstance(tid, bool) or not isinstance(tid, int) or tid < 0:
                raise FormatError(path, number, "id must be a non-negative integer")
            if isinstance(cls, bool) or not isinstance(cls, int) or cls < 0:
                raise FormatError(path, number, "class must be a non-negative integer")
            box = _vector(path, number, _field(path, number, item, "box"), 4, "box")
            conf = float(item.get("conf", 1.0))
            if not 0.0 <= conf <= 1.0:
                raise FormatError(path, number, "conf must lie in [0, 1]")
            cov = None
            if "cov" in item:
                cov = _vector(path, number, item["cov"], 16, "cov").reshape(4, 4)
            probs = None
            if "probs" in item:
                probs = _vector(path, number, item["probs"], None, "probs")
            try:
                ObjectState(box, cls, tid)
            except ValueError as exc:
                raise FormatError(path, number, str(exc)) from None
            objs.append(ObjectRecord(tid, box, cls, conf, cov, probs))
        out.append((t, objs))
    return out


def truth_frames(truth: Sequence[Sequence[ObjectState]]) -> ObjectFrames:
    return [(t, [ObjectRecord.from_state(o, i) for i, o in enumerate(objs)]) for t, objs in enumerate(truth)]


# ---------------------------------------------------------------------------
# params
# ---------------------------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    m = params.motion
    return {
        "schema": PARAMS_SCHEMA,
        "version": SCHEMA_VERSION,
        "lambda_death": params.lambda_death,
        "lambda_birth": params.lambda_birth,
        "alpha": params.alpha,
        "prior_mean": _floats(params.prior_mean),
        "prior_cov": _floats(params.prior_cov),
        "num_classes": params.num_classes,
        "iou_min": params.iou_min,
        "eps_pd": params.eps_pd,
        "cluster_iou": params.cluster_iou,
        "motion": {"A": _floats(m.A), "b": _floats(m.b), "s": _floats(m.s)},
    }


def params_from_dict(data: dict, path="<params>") -> ModelParams:
    if data.get("schema") != PARAMS_SCHEMA:
        raise FormatError(path, None, f"expected schema {PARAMS_SCHEMA!r}")
    if data.get("version") != SCHEMA_VERSION:
        raise FormatError(path, None, f"unsupported schema version {data.get('version')!r}")
    try:
        motion = data["motion"]
        return ModelParams(
            lambda_death=float(data["lambda_death"]),
            lambda_birth=float(data["lambda_birth"]),
            alpha=float(data["alpha"]),
            prior_mean=np.array(data["prior_mean"], dtype=np.float64),
            prior_cov=np.array(data["prior_cov"], dtype=np.float64).reshape(4, 4),
            num_classes=int(data["num_classes"]),
            iou_min=float(data["iou_min"]),
            eps_pd=float(data["eps_pd"]),
            cluster_iou=float(data["cluster_iou"]),
            motion=MotionParams(
                np.array(motion["A"], dtype=np.float64).reshape(4, 4),
                np.array(motion["b"], dtype=np.float64),
                np.array(motion["s"], dtype=np.float64),
            ),
        )
    except KeyError as exc:
        raise FormatError(path, None, f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(path, None, str(exc)) from None


def write_params(path, params: ModelParams, force: bool = False) -> None:
    with _open_for_write(path, force) as fh:
        fh.write(json.dumps(params_to_dict(params), indent=2, allow_nan=False) + "\n")


def read_params(path) -> ModelParams:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return params_from_dict(data, path)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _cell(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return value


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], force: bool = False) -> None:
    with _open_for_write(path, force) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(path, 1, "empty CSV")
    return rows[0], rows[1:]
