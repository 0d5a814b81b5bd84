"""Versioned binary containers for frozen models and JSON files for baselines.

Container layout::

    magic       8 bytes   b"RGMODEL\\x00"
    version     uint32 little-endian
    header_len  uint64 little-endian
    header      UTF-8 JSON (sorted keys, compact separators)
    payload     arrays back to back, each C-ordered little-endian float64

The header names the model kind, the schema hash, the config the model was
trained with, and every array's name, shape and byte offset, plus a SHA-256
of the payload. Writing is deterministic: equal models give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .cdae import ContractiveDenoisingAutoencoder
from .ejt import EjtBaseline
from .grbm import GaussianRBM
from .population import FeatureStandardizer, RobustScaler
from .schema import SchemaError, check_schema_hash

MAGIC = b"RGMODEL\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

ENCODER = "encoder"
GRBM = "grbm"


class ModelFileError(ValueError):
    """Malformed, truncated or tampered model container."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path, kind: str, schema_hash: str, config: dict, arrays: dict) -> None:
    """Write named float64 arrays with a JSON header; ``arrays`` order is preserved."""
    blobs, table, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        blob = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = _dumps({
        "kind": kind,
        "schema_hash": schema_hash,
        "config": config,
        "arrays": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    })
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def read_container(path, kind: str | None = None,
                   expected_schema_hash: str | None = None) -> tuple[dict, dict]:
    """Return (header, arrays); verifies magic, version, payload hash and shapes."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ModelFileError(f"{path}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError(f"{path}: not a model container")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable header: {exc}") from exc
    payload = data[start + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise ModelFileError(f"{path}: payload length {len(payload)} != {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ModelFileError(f"{path}: payload hash mismatch")
    if kind is not None and header.get("kind") != kind:
        raise ModelFileError(f"{path}: expected a {kind} container, found {header.get('kind')}")
    if expected_schema_hash is not None:
        check_schema_hash(expected_schema_hash, header.get("schema_hash", ""), what=str(path))
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        off = entry["offset"]
        if off + n > len(payload):
            raise ModelFileError(f"{path}: array {entry['name']} overruns the payload")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=n // 8,
                                              offset=off).reshape(shape).astype(np.float64)
    return header, arrays


def _expect_shape(arrays, name, shape, path):
    got = arrays[name].shape
    if got != tuple(shape):
        raise ModelFileError(f"{path}: {name} has shape {got}, expected {tuple(shape)}")


# -- encoder (scaler + CDAE) ---------------------------------------------------------

def save_encoder(path, model: ContractiveDenoisingAutoencoder, scaler: RobustScaler,
                 schema_hash: str) -> None:
    config = {k: v for k, v in sorted(model.get_params().items())}
    config["scaler_epsilon"] = scaler.epsilon
    config["scaler_n_fallback"] = int(scaler.n_fallback_)
    config["n_features_in"] = int(model.n_features_in_)
    arrays = {"scaler_center": scaler.center_, "scaler_spread": scaler.spread_}
    arrays.update({k: model.params_[k] for k in sorted(model.params_)})
    write_container(path, ENCODER, schema_hash, config, arrays)


def load_encoder(path, expected_schema_hash: str | None = None
                 ) -> tuple[ContractiveDenoisingAutoencoder, RobustScaler, str]:
    header, arrays = read_container(path, ENCODER, expected_schema_hash)
    cfg = dict(header["config"])
    n_in = cfg.pop("n_features_in")
    eps = cfg.pop("scaler_epsilon")
    n_fallback = cfg.pop("scaler_n_fallback")
    model = ContractiveDenoisingAutoencoder(**cfg)
    h, k = model.n_hidden, model.n_latent
    for name, shape in (("W1", (h, n_in)), ("b1", (h,)), ("W2", (k, h)), ("b2", (k,)),
                        ("W3", (h, k)), ("b3", (h,)), ("W4", (n_in, h)), ("b4", (n_in,)),
                        ("scaler_center", (n_in,)), ("scaler_spread", (n_in,))):
        _expect_shape(arrays, name, shape, path)
    model.params_ = {name: arrays[name] for name in ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")}
    model.n_features_in_ = n_in
    model.freeze()
    scaler = RobustScaler(eps)
    scaler.center_, scaler.spread_ = arrays["scaler_center"], arrays["scaler_spread"]
    scaler.n_features_in_ = n_in
    scaler.n_fallback_ = n_fallback
    scaler.freeze()
    return model, scaler, header["schema_hash"]


# -- GRBM (standardizer + RBM) -------------------------------------------------------

def save_grbm(path, model: GaussianRBM, standardizer: FeatureStandardizer, schema_hash: str) -> None:
    config = {k: v for k, v in sorted(model.get_params().items())}
    config["standardizer_epsilon"] = standardizer.epsilon
    config["n_features_in"] = int(model.n_features_in_)
    config["n_sigma_clamped"] = int(getattr(model, "n_sigma_clamped_", 0))
    config["standardizer_n_fallback"] = int(standardizer.scaler_.n_fallback_)
    arrays = {
        "continuous_mask": standardizer.continuous_.astype(float),
        "standardizer_center": standardizer.scaler_.center_,
        "standardizer_spread": standardizer.scaler_.spread_,
        "visible_bias": model.visible_bias_,
        "log_var": model.log_var_,
        "weights": model.weights_,
        "hidden_bias": model.hidden_bias_,
    }
    write_container(path, GRBM, schema_hash, config, arrays)


def load_grbm(path, expected_schema_hash: str | None = None
              ) -> tuple[GaussianRBM, FeatureStandardizer, str]:
    header, arrays = read_container(path, GRBM, expected_schema_hash)
    cfg = dict(header["config"])
    d = cfg.pop("n_features_in")
    eps = cfg.pop("standardizer_epsilon")
    clamped = cfg.pop("n_sigma_clamped")
    n_fallback = cfg.pop("standardizer_n_fallback")
    model = GaussianRBM(**cfg)
    for name, shape in (("visible_bias", (d,)), ("log_var", (d,)), ("weights", (d, model.n_hidden)),
                        ("hidden_bias", (model.n_hidden,)), ("continuous_mask", (d,))):
        _expect_shape(arrays, name, shape, path)
    model.visible_bias_ = arrays["visible_bias"]
    model.log_var_ = arrays["log_var"]
    model.weights_ = arrays["weights"]
    model.hidden_bias_ = arrays["hidden_bias"]
    model.n_features_in_ = d
    model.n_sigma_clamped_ = clamped
    model.conditioning_ = model.conditioning_report()
    model.freeze()

    mask = arrays["continuous_mask"]
    if not np.all((mask == 0) | (mask == 1)):
        raise ModelFileError(f"{path}: continuous mask is not boolean")
    continuous = mask.astype(bool)
    n_cont = int(continuous.sum())
    _expect_shape(arrays, "standardizer_center", (n_cont,), path)
    _expect_shape(arrays, "standardizer_spread", (n_cont,), path)
    std = FeatureStandardizer(flag_mask=~continuous, epsilon=eps)
    std.continuous_ = continuous
    inner = RobustScaler(eps)
    inner.center_, inner.spread_ = arrays["standardizer_center"], arrays["standardizer_spread"]
    inner.n_features_in_ = n_cont
    inner.n_fallback_ = n_fallback
    inner.frozen_ = True
    std.scaler_ = inner
    std.n_features_in_ = d
    std.freeze()
    return model, std, header["schema_hash"]


# -- baselines -----------------------------------------------------------------------

def baselines_to_dict(baselines, schema_hash: str) -> dict:
    def one(b: EjtBaseline) -> dict:
        return {"mean": b.mean, "std": b.std,
                "source_windows": [str(w) for w in b.source_windows]}

    return {
        "format_version": FORMAT_VERSION,
        "schema_hash": schema_hash,
        "global": one(baselines.global_),
        "guard": one(baselines.guard),
        "exit": one(baselines.exit),
        "shift_median": dict(sorted(baselines.shift_median.items())),
    }


def save_baselines(path, baselines, schema_hash: str) -> None:
    Path(path).write_bytes(_dumps(baselines_to_dict(baselines, schema_hash)) + b"\n")


def load_baselines(path, expected_schema_hash: str | None = None):
    from .harness import Baselines  # harness imports this module's callers

    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable baselines: {exc}") from exc
    if d.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported baselines version {d.get('format_version')}")
    if expected_schema_hash is not None:
        check_schema_hash(expected_schema_hash, d.get("schema_hash", ""), what=str(path))

    def one(x) -> EjtBaseline:
        return EjtBaseline(float(x["mean"]), float(x["std"]), tuple(x.get("source_windows", ())))

    try:
        return Baselines(one(d["global"]), one(d["guard"]), one(d["exit"]),
                         {k: float(v) for k, v in d["shift_median"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed baselines: {exc}") from exc


# -- bundles -------------------------------------------------------------------------

def save_models(models, encoder_path, grbm_path) -> None:
    h = models.schema.hash()
    save_encoder(encoder_path, models.cdae, models.scaler, h)
    save_grbm(grbm_path, models.grbm, models.standardizer, h)


def load_models(encoder_path, grbm_path, schema):
    """Rebuild a frozen model bundle; both files must carry ``schema``'s hash."""
    from .harness import ObserverModels

    h = schema.hash()
    cdae, scaler, _ = load_encoder(encoder_path, h)
    grbm, std, _ = load_grbm(grbm_path, h)
    if scaler.n_features_in_ != len(schema.clean_indices) or grbm.n_features_in_ != schema.n_features:
        raise SchemaError("model input widths disagree with the schema")
    return ObserverModels(schema, scaler, std, cdae, grbm)
