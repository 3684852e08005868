"""On-disk formats.

Dataset file (little-endian)::

    b"DNCE" | u32 version=1 | u64 n | u64 d | u64 c
    | f32[n*d] embeddings, row-major | u32[n] labels

A ``.csv`` path is read as text instead: one row per point, ``d`` floats then
an integer label, ``#`` lines ignored; the class count is ``max(label) + 1``.

Model file (little-endian)::

    b"DNCM" | u32 version=1 | u64 n | u64 d | u64 c
    | f64 bandwidth | f64 shape | f64 ridge | f64 validation_accuracy
    | u64 selected_iteration
    | f64[d*d] M | f64[n*d] reference embeddings | f64[n*c] coefficients

Calibration artifacts and reports are JSON. Floats are written with 17
significant digits; an infinite threshold is written as the string "inf".
"""

import json
import math
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from dance.conformal import CalibrationArtifact, ScoreConfig
from dance.data import EmbeddedDataset
from dance.errors import FormatError, ValidationError
from dance.kernels import KernelParams
from dance.rfm import KrrModel, RfmModel

DATASET_MAGIC = b"DNCE"
MODEL_MAGIC = b"DNCM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")
_MODEL_EXTRA = struct.Struct("<ddddQ")


def _read_header(buf, magic, what):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{what} file is truncated ({len(buf)} bytes)")
    got, version, n, d, c = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported {what} version {version}")
    return n, d, c


def write_dataset(data, path):
    if len(data) < 1:
        raise ValidationError("refusing to write an empty dataset")
    n, d = data.embeddings.shape
    z = data.embeddings.astype("<f4")
    if not np.all(np.isfinite(z)):
        raise ValidationError("embeddings overflow float32")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, VERSION, n, d, data.class_count))
        fh.write(z.tobytes(order="C"))
        fh.write(data.labels.astype("<u4").tobytes())


def _read_csv(path):
    try:
        table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"cannot parse {path}: {exc}") from exc
    if table.shape[0] < 1 or table.shape[1] < 2:
        raise FormatError(f"{path} needs at least one row of d >= 1 values plus a label")
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise ValidationError("CSV labels must be nonnegative integers")
    labels = labels.astype(np.int64)
    return EmbeddedDataset(table[:, :-1], labels, int(labels.max()) + 1)


def read_dataset(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    buf = path.read_bytes()
    n, d, c = _read_header(buf, DATASET_MAGIC, "dataset")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(buf) != expected:
        raise FormatError(f"dataset payload is {len(buf)} bytes, header implies {expected}")
    z = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEADER.size).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=_HEADER.size + 4 * n * d).astype(np.int64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("dataset contains non-finite embeddings")
    if n and labels.max() >= c:
        raise ValidationError(f"label {labels.max()} is not below class count {c}")
    return EmbeddedDataset(z.reshape(n, d), labels, c)


def write_model(model, path):
    krr = model.krr
    n, d = krr.reference_embeddings.shape
    c = krr.coefficients.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, VERSION, n, d, c))
        fh.write(_MODEL_EXTRA.pack(krr.kernel.bandwidth, krr.kernel.shape, krr.ridge,
                                   model.validation_accuracy, model.selected_iteration))
        for block in (krr.kernel.feature_matrix, krr.reference_embeddings, krr.coefficients):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_model(path):
    buf = Path(path).read_bytes()
    n, d, c = _read_header(buf, MODEL_MAGIC, "model")
    offset = _HEADER.size + _MODEL_EXTRA.size
    expected = offset + 8 * (d * d + n * d + n * c)
    if len(buf) != expected:
        raise FormatError(f"model payload is {len(buf)} bytes, header implies {expected}")
    bandwidth, shape, ridge, acc, iteration = _MODEL_EXTRA.unpack_from(buf, _HEADER.size)
    blocks = []
    for count, shape_ in ((d * d, (d, d)), (n * d, (n, d)), (n * c, (n, c))):
        blocks.append(np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape_).copy())
        offset += 8 * count
    m, z, beta = blocks
    kernel = KernelParams(m, bandwidth, shape)
    return RfmModel(KrrModel(z, beta, kernel, ridge), m, acc, int(iteration))


# -- JSON --------------------------------------------------------------------

def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            raise ValueError(f"cannot encode non-finite float {value} in JSON")
        text = "%.17g" % value
        return text if any(ch in text for ch in ".en") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def canonical_json(obj, indent=2):
    """Deterministic JSON text: key order as given, floats at 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_report(reports, path, config=None):
    doc = {"config": config if config is not None else {}, "results": [r.to_dict() for r in reports]}
    Path(path).write_text(canonical_json(doc), encoding="utf-8")


def _threshold_out(q):
    return "inf" if math.isinf(q) and q > 0 else q


def _threshold_in(q):
    if q == "inf":
        return math.inf
    if isinstance(q, (int, float)) and not isinstance(q, bool):
        return float(q)
    raise FormatError(f"bad threshold value {q!r}")


def write_artifact(art, path):
    doc = {
        "format": "dance-calibration",
        "version": VERSION,
        "q_knn": _threshold_out(art.q_knn),
        "q_clr": _threshold_out(art.q_clr),
        "alpha": art.alpha,
        "lambda": art.lam,
        "alpha_knn": art.alpha_knn,
        "alpha_clr": art.alpha_clr,
        "mode": art.mode,
        "n_cal": art.n_cal,
        "score_config": asdict(art.score_config),
    }
    Path(path).write_text(canonical_json(doc), encoding="utf-8")


def read_artifact(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if doc.get("format") != "dance-calibration" or doc.get("version") != VERSION:
        raise FormatError(f"{path} is not a version-{VERSION} calibration artifact")
    try:
        return CalibrationArtifact(
            q_knn=_threshold_in(doc["q_knn"]),
            q_clr=_threshold_in(doc["q_clr"]),
            alpha=float(doc["alpha"]),
            lam=float(doc["lambda"]),
            mode=doc["mode"],
            score_config=ScoreConfig(**doc["score_config"]),
            n_cal=int(doc["n_cal"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path} is missing artifact fields: {exc}") from exc
