"""Lossless model serialization.

Archives are JSON documents with every float stored as a hex literal and
every array as base64 of its little-endian float64 bytes, so a round trip
reproduces parameters bit for bit. Serialization is canonical (sorted
keys, fixed separators): saving a loaded archive yields identical bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .data import ColumnSchema
from .distributions import DistributionSpec
from .errors import ArchiveError
from .lattice import Calibrator, LatticeParams, build_constraints
from .mlp import MlpParams
from .model import AdditiveModel, Term, TermSpec

FORMAT_VERSION = 1


def _enc_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _dec_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).copy()


def _enc_float(x: float) -> str:
    return float(x).hex()


def _dec_float(s: str) -> float:
    return float.fromhex(s)


def _enc_term(term: Term) -> dict:
    doc = {
        "spec": term.spec.to_dict(),
        "alpha": _enc_float(term.alpha[0]),
        "center": _enc_float(term.center),
    }
    if term.spec.backend == "mlp":
        doc["mlp"] = {
            "weights": [_enc_array(w) for w in term.mlp.weights],
            "biases": [_enc_array(b) for b in term.mlp.biases],
            "activations": list(term.mlp.activations),
            "leaky_slope": _enc_float(term.mlp.leaky_slope),
        }
    else:
        doc["lattice"] = {
            "values": _enc_array(term.lattice.values),
            "monotonic": list(term.lattice.monotonic),
        }
        doc["calibrators"] = [
            None
            if cal is None
            else {
                "knots": _enc_array(cal.knots),
                "values": _enc_array(cal.values),
                "out_max": _enc_float(cal.out_max),
                "monotonic": cal.monotonic,
            }
            for cal in term.calibrators
        ]
    return doc


def _dec_term(doc: dict) -> Term:
    spec = TermSpec.from_dict(doc["spec"])
    term = Term(spec=spec, alpha=np.array([_dec_float(doc["alpha"])]),
                center=_dec_float(doc["center"]))
    if spec.backend == "mlp":
        m = doc["mlp"]
        term.mlp = MlpParams(
            weights=[_dec_array(w) for w in m["weights"]],
            biases=[_dec_array(b) for b in m["biases"]],
            activations=list(m["activations"]),
            leaky_slope=_dec_float(m["leaky_slope"]),
        )
    else:
        lat = doc["lattice"]
        term.lattice = LatticeParams(values=_dec_array(lat["values"]),
                                     monotonic=tuple(lat["monotonic"]))
        term.constraints = build_constraints(term.lattice)
        term.calibrators = [
            None
            if cal is None
            else Calibrator(
                knots=_dec_array(cal["knots"]),
                values=_dec_array(cal["values"]),
                out_max=_dec_float(cal["out_max"]),
                monotonic=cal["monotonic"],
            )
            for cal in doc["calibrators"]
        ]
    return term


def model_to_doc(model: AdditiveModel, train_config: dict | None = None,
                 history_digest: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "schema": [c.to_dict() for c in model.feature_columns],
        "distribution": model.distribution.to_dict(),
        "uses_offset": model.uses_offset,
        "clip": [_enc_float(model.clip_lo), _enc_float(model.clip_hi)],
        "bias": _enc_float(model.bias[0]),
        "feature_ranges": {
            k: [_enc_float(lo), _enc_float(hi)] for k, (lo, hi) in model.feature_ranges.items()
        },
        "terms": [_enc_term(t) for t in model.terms],
        "train_config": train_config,
        "history_digest": history_digest,
    }


def model_from_doc(doc: dict) -> AdditiveModel:
    version = doc.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise ArchiveError(
            f"archive format version {version!r} is not supported (this build reads <= {FORMAT_VERSION})"
        )
    columns = [ColumnSchema.from_dict(c) for c in doc["schema"]]
    model = AdditiveModel(
        columns,
        [_dec_term(t) for t in doc["terms"]],
        DistributionSpec.from_dict(doc["distribution"]),
        uses_offset=doc["uses_offset"],
        clip_lo=_dec_float(doc["clip"][0]),
        clip_hi=_dec_float(doc["clip"][1]),
        feature_ranges={
            k: (_dec_float(lo), _dec_float(hi)) for k, (lo, hi) in doc["feature_ranges"].items()
        },
    )
    model.bias[0] = _dec_float(doc["bias"])
    return model


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model: AdditiveModel, path, train_config: dict | None = None,
               history_digest: dict | None = None) -> None:
    Path(path).write_text(dumps(model_to_doc(model, train_config, history_digest)),
                          encoding="utf-8")


def load_model(path) -> AdditiveModel:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"model archive not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"malformed model archive {path}: {exc}") from exc
    return model_from_doc(doc)


def load_archive_doc(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"model archive not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
