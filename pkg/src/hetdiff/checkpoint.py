"""Checkpoint persistence.

Layout::

    HETDIFF-CKPT\\n
    <manifest byte length>\\n
    <manifest JSON, UTF-8>
    <payload: named blocks of row-major little-endian float64>

The manifest lists every block with its shape and byte offset into the
payload.  Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .aggregation import AttentionParams
from .autodiff import Tensor
from .diffusion import DenoiserParams
from .errors import DataError
from .model import MLPParams, ModelParams
from .training import TrainConfig, TrainedModel

MAGIC = b"HETDIFF-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    """Payload size disagrees with what the manifest declares."""


def _blocks(model: TrainedModel) -> dict[str, np.ndarray]:
    out = {name: t.values for name, t in model.params.named_tensors().items()}
    out["final.drug"] = model.final_d
    out["final.gene"] = model.final_g
    out["drug_degree"] = np.asarray(model.drug_degree, dtype=np.float64)
    return out


def encode(model: TrainedModel) -> tuple[bytes, bytes]:
    """``(manifest_bytes, payload_bytes)`` for a trained model."""
    blocks = []
    chunks = []
    offset = 0
    for name, arr in _blocks(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "hetdiff-checkpoint",
        "version": FORMAT_VERSION,
        "dim": model.params.dim,
        "counts": {"n_a": len(model.a_ids), "n_b": len(model.b_ids)},
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "a_ids": list(model.a_ids),
        "b_ids": list(model.b_ids),
        "blocks": blocks,
        "payload_bytes": offset,
    }
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"), b"".join(chunks)


def save_checkpoint(model: TrainedModel, path) -> None:
    path = Path(path)
    manifest, payload = encode(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(f"{len(manifest)}\n".encode("ascii"))
            fh.write(manifest)
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_raw(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise CheckpointTruncatedError(f"{path}: file ends inside the header")
        raise CheckpointFormatError(f"{path}: not a hetdiff checkpoint")
    rest = data[len(MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    try:
        mlen = int(rest[:nl])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: bad manifest length") from exc
    body = rest[nl + 1 :]
    if len(body) < mlen:
        raise CheckpointTruncatedError(f"{path}: file ends inside the manifest")
    try:
        manifest = json.loads(body[:mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != "hetdiff-checkpoint":
        raise CheckpointFormatError(f"{path}: unexpected format tag {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    payload = body[mlen:]
    declared = manifest["payload_bytes"]
    block_total = sum(b["nbytes"] for b in manifest["blocks"])
    if len(payload) != declared or block_total != declared:
        raise CheckpointLengthError(f"{path}: payload has {len(payload)} bytes, manifest declares {declared} (blocks sum to {block_total})")
    return manifest, payload


def load_checkpoint(path) -> tuple[TrainedModel, TrainConfig]:
    manifest, payload = read_raw(path)
    arrays = {}
    for b in manifest["blocks"]:
        n = int(np.prod(b["shape"])) if b["shape"] else 1
        if b["nbytes"] != 8 * n:
            raise CheckpointLengthError(f"{path}: block {b['name']} length disagrees with its shape")
        arrays[b["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=b["offset"]).reshape(b["shape"]).astype(np.float64)
    config = TrainConfig.from_dict(manifest["config"])

    def t(name):
        return Tensor(arrays[name], requires_grad=True, name=name)

    try:
        params = ModelParams(
            h_d=t("emb.drug"),
            h_g=t("emb.gene"),
            att_d=AttentionParams(t("att.drug"), config.slope),
            att_g=AttentionParams(t("att.gene"), config.slope),
            denoiser=DenoiserParams(t("denoiser.w1"), t("denoiser.b1"), t("denoiser.w2"), t("denoiser.b2")),
            mlp1=MLPParams(t("mlp1.w1"), t("mlp1.b1"), t("mlp1.w2"), t("mlp1.b2")),
            mlp2=MLPParams(t("mlp2.w1"), t("mlp2.b1"), t("mlp2.w2"), t("mlp2.b2")),
        )
        model = TrainedModel(
            params,
            config,
            arrays["final.drug"],
            arrays["final.gene"],
            tuple(manifest["a_ids"]),
            tuple(manifest["b_ids"]),
            arrays["drug_degree"],
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing block {exc}") from exc
    return model, config
