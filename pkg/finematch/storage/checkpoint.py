"""
Checkpoint (de)serialization. Parameters use the same base64 little-endian
float32 convention as record files and are keyed by canonical names
(`image.<name>`, `text.<name>`).
"""

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from finematch.config.settings import RunConfig
from finematch.core.hashing import UnsupportedHashAlgorithm, checksum, compare
from finematch.core.models import Checkpoint, EncoderParams

CHECKPOINT_VERSION = 1
HASH_ALGORITHM = "xxh3"


class CheckpointError(ValueError):
    pass


def snap_to_float32(array: np.ndarray) -> np.ndarray:
    """
    Round to the float32 grid (and widen back), i.e. exactly what survives a
    round trip through a checkpoint file.
    """
    return np.asarray(array, dtype="<f4").astype(np.float64)


def snap_params(params: EncoderParams | None) -> EncoderParams | None:
    if params is None:
        return None
    return params.replace({k: snap_to_float32(v) for k, v in params.tensors.items()})


def _encode_tensors(prefix: str, params: EncoderParams | None) -> dict[str, Any]:
    if params is None:
        return {}

    return {
        f"{prefix}.{name}": {
            "shape": list(params.tensors[name].shape),
            "data": base64.b64encode(
                np.asarray(params.tensors[name], dtype="<f4").tobytes()
            ).decode("ascii"),
        }
        for name in params.names()
    }


def _describe(params: EncoderParams | None) -> dict[str, Any] | None:
    if params is None:
        return None

    return {
        "dim": params.dim,
        "heads": params.heads,
        "ffn_ratio": params.ffn_ratio,
        "num_layers": params.num_layers,
        "architecture": params.architecture,
    }


def checkpoint_to_json(checkpoint: Checkpoint) -> str:
    tensors = {
        **_encode_tensors("image", checkpoint.image),
        **_encode_tensors("text", checkpoint.text),
    }
    payload = json.dumps(tensors, sort_keys=True, separators=(",", ":"))

    content = {
        "version": CHECKPOINT_VERSION,
        "epoch": checkpoint.epoch,
        "loss": checkpoint.loss,
        "validation_loss": checkpoint.validation_loss,
        "config": checkpoint.config.model_dump(mode="json"),
        "heads": {
            "image": _describe(checkpoint.image),
            "text": _describe(checkpoint.text),
        },
        "hash_algorithm": HASH_ALGORITHM,
        "checksum": checksum(payload, hash_algorithm=HASH_ALGORITHM),
        "tensors": tensors,
    }

    return json.dumps(content, sort_keys=True, indent=1)


def _decode_head(
    prefix: str, description: dict[str, Any] | None, tensors: dict[str, Any]
) -> EncoderParams | None:
    if description is None:
        return None

    arrays = {}

    for key, entry in tensors.items():
        if not key.startswith(prefix + "."):
            continue

        raw = base64.b64decode(entry["data"].encode("ascii"))
        shape = tuple(entry["shape"])
        values = np.frombuffer(raw, dtype="<f4")

        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"Tensor {key} does not match its shape {shape}")

        arrays[key[len(prefix) + 1 :]] = values.astype(np.float64).reshape(shape)

    return EncoderParams(tensors=arrays, **description)


def checkpoint_from_json(content: str) -> Checkpoint:
    try:
        data = json.loads(content)
        version = data["version"]
        tensors = data["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise CheckpointError("Malformed checkpoint")

    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    payload = json.dumps(tensors, sort_keys=True, separators=(",", ":"))

    try:
        intact = compare(
            payload,
            str(data.get("checksum")),
            hash_algorithm=data.get("hash_algorithm", HASH_ALGORITHM),
        )
    except UnsupportedHashAlgorithm as e:
        raise CheckpointError(str(e))

    if not intact:
        raise CheckpointError("Checkpoint checksum does not match its tensors")

    try:
        return Checkpoint(
            config=RunConfig(**data["config"]),
            image=_decode_head("image", data["heads"]["image"], tensors),
            text=_decode_head("text", data["heads"]["text"], tensors),
            epoch=data["epoch"],
            loss=data["loss"],
            validation_loss=data.get("validation_loss"),
        )
    except (ValidationError, KeyError) as e:
        raise CheckpointError(f"Invalid checkpoint content: {e}")


def write_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(checkpoint_to_json(checkpoint) + "\n")


def read_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} does not exist")

    with open(path, encoding="utf-8") as handle:
        return checkpoint_from_json(handle.read())
