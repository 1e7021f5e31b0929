"""
Versioned checkpoint container. A file holds a magic line, a one-line JSON
header and a torch-serialized payload of tensors and plain values. The
header carries the config, its hash, the seed, the payload checksum and the
trained flag.
"""

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from pydantic import BaseModel

from xling_emotion_tts.exceptions import CheckpointError, MissingArtifactError

MAGIC = b"XETCKPT\n"
FORMAT_VERSION = 1


def config_hash(config: Union[BaseModel, Dict[str, Any]]) -> str:
    """sha256 of the canonical JSON form of a config"""
    if isinstance(config, BaseModel):
        config = config.model_dump(mode="json")
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path: Union[Path, str]) -> str:
    """sha256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class Checkpoint:
    """Decoded checkpoint"""

    kind: str
    seed: int
    config: Dict[str, Any]
    config_hash: str
    trained: bool
    metadata: Dict[str, Any]
    state: Dict[str, Any]


def save_checkpoint(
    path: Union[Path, str],
    kind: str,
    state: Dict[str, Any],
    config: Union[BaseModel, Dict[str, Any]],
    seed: int,
    trained: bool = True,
    metadata: Optional[Dict[str, Any]] = None,
) -> str:
    """
    Writes a checkpoint.
    Parameters
    ----------
    path : Union[Path, str]
    kind : str
      e.g. 'codebook', 'speaker_encoder', 'txt2vec'
    state : Dict[str, Any]
      Tensors, numbers, strings and containers of them
    config : Union[BaseModel, Dict[str, Any]]
    seed : int
    trained : bool
    metadata : Optional[Dict[str, Any]]
      JSON-serializable extras, e.g. encoder digests

    Returns
    -------
    str
      sha256 of the written file

    """
    if isinstance(config, BaseModel):
        config = config.model_dump(mode="json")
    buffer = io.BytesIO()
    torch.save(state, buffer)
    payload = buffer.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "trained": trained,
        "metadata": metadata or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }
    header_line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(MAGIC + header_line + payload)
    tmp_path.replace(path)
    return file_digest(path)


def load_checkpoint(
    path: Union[Path, str],
    expected_kind: Optional[str] = None,
    require_trained: bool = False,
    artifact: Optional[str] = None,
) -> Checkpoint:
    """
    Reads and verifies a checkpoint.
    Parameters
    ----------
    path : Union[Path, str]
    expected_kind : Optional[str]
    require_trained : bool
      Raise CheckpointError if the trained flag is not set
    artifact : Optional[str]
      Name used in the MissingArtifactError message

    Returns
    -------
    Checkpoint

    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(
            artifact or expected_kind or "checkpoint", path
        )
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    header_end = raw.find(b"\n", len(MAGIC))
    if header_end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version "
            f"{header.get('format_version')}"
        )
    payload = raw[header_end + 1 :]
    if (
        len(payload) != header["payload_bytes"]
        or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]
    ):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise CheckpointError(
            f"{path}: expected a {expected_kind} checkpoint, "
            f"found {header['kind']}"
        )
    if require_trained and not header["trained"]:
        raise CheckpointError(f"{path}: checkpoint is not trained")
    state = torch.load(io.BytesIO(payload), weights_only=True)
    return Checkpoint(
        kind=header["kind"],
        seed=header["seed"],
        config=header["config"],
        config_hash=header["config_hash"],
        trained=header["trained"],
        metadata=header["metadata"],
        state=state,
    )
