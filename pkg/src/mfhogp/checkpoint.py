"""Single-file checkpoints for trained models.

Layout: the 5-byte magic ``MFHG1``, a little-endian uint64 header length, a
UTF-8 JSON header, then one contiguous blob of little-endian row-major
float64 arrays. The header carries ``kind`` (which model the file holds),
``config`` (JSON-safe scalars), and an ``arrays`` directory of name, shape,
and byte offset into the blob. Loading validates the magic and every
declared extent, so truncated or foreign files fail with ``IoFailure``
instead of yielding garbage arrays.
"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baseline import PcaGpModel, ScalarGp
from .errors import IoFailure
from .mfmodel import ModelConfig, ModelState

MAGIC = b"MFHG1"
FORMAT_NAME = "mfhogp-checkpoint"
FORMAT_VERSION = 1

MODEL_KIND = "multi-fidelity-model"
BASELINE_KIND = "pca-gp-model"


def save_blob(path, kind: str, config: dict, arrays: dict) -> None:
    """Write one (kind, config, named float64 arrays) container."""
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8")
        directory.append(
            {"name": name, "shape": list(value.shape), "offset": offset}
        )
        chunks.append(value.tobytes(order="C"))
        offset += len(chunks[-1])
    header = json.dumps(
        {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": kind,
            "config": config,
            "arrays": directory,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        fh.write(b"".join(chunks))


def load_blob(path) -> tuple:
    """Read a container back as (kind, config, arrays)."""
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise IoFailure(f"{path} is not a model checkpoint (bad magic)")
    header_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=len(MAGIC))[0])
    blob_start = len(MAGIC) + 8 + header_len
    if len(raw) < blob_start:
        raise IoFailure(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailure(f"{path} has an unreadable header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise IoFailure(f"{path} holds {header.get('format')!r}, not a checkpoint")
    arrays = {}
    blob = raw[blob_start:]
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + 8 * count
        if end > len(blob):
            raise IoFailure(
                f"{path} is truncated: array {entry['name']!r} needs bytes "
                f"up to {end}, blob has {len(blob)}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=start)
            .reshape(shape)
            .copy()
        )
    return header["kind"], header["config"], arrays


def save_model(path, state: ModelState) -> None:
    """Checkpoint a multi-fidelity model (its config and every parameter)."""
    config = asdict(state.config)
    config["trained"] = bool(state.trained)
    save_blob(path, MODEL_KIND, config, state.params)


def load_model(path) -> ModelState:
    kind, config, arrays = load_blob(path)
    if kind != MODEL_KIND:
        raise IoFailure(f"{path} holds a {kind!r} checkpoint, not a model")
    trained = bool(config.pop("trained"))
    config["factor_lens"] = tuple(int(v) for v in config["factor_lens"])
    config["level_counts"] = tuple(int(v) for v in config["level_counts"])
    return ModelState(ModelConfig(**config), arrays, trained=trained)


def save_baseline(path, model: PcaGpModel) -> None:
    """Checkpoint a PCA-GP baseline (bases, scores, and every scalar GP)."""
    config = {
        "trained": bool(model.trained),
        "num_components": int(model.num_components),
        "log_amplitudes": [gp.log_amplitude for gp in model.gps],
        "log_noise_variances": [gp.log_noise_variance for gp in model.gps],
        "log_marginal_likelihoods": [
            gp.log_marginal_likelihood for gp in model.gps
        ],
    }
    arrays = {
        "mean_vector": model.mean_vector,
        "bases": model.bases,
        "scores": model.scores,
    }
    for j, gp in enumerate(model.gps):
        arrays[f"gp/{j}/x_train"] = gp.x_train
        arrays[f"gp/{j}/y_train"] = gp.y_train
        arrays[f"gp/{j}/log_lengthscales"] = gp.log_lengthscales
        arrays[f"gp/{j}/chol"] = gp.chol
        arrays[f"gp/{j}/weights"] = gp.weights
    save_blob(path, BASELINE_KIND, config, arrays)


def load_baseline(path) -> PcaGpModel:
    kind, config, arrays = load_blob(path)
    if kind != BASELINE_KIND:
        raise IoFailure(f"{path} holds a {kind!r} checkpoint, not a baseline")
    gps = [
        ScalarGp(
            arrays[f"gp/{j}/x_train"],
            arrays[f"gp/{j}/y_train"],
            arrays[f"gp/{j}/log_lengthscales"],
            float(config["log_amplitudes"][j]),
            float(config["log_noise_variances"][j]),
            arrays[f"gp/{j}/chol"],
            arrays[f"gp/{j}/weights"],
            float(config["log_marginal_likelihoods"][j]),
        )
        for j in range(int(config["num_components"]))
    ]
    return PcaGpModel(
        arrays["mean_vector"],
        arrays["bases"],
        arrays["scores"],
        gps,
        trained=bool(config["trained"]),
    )
