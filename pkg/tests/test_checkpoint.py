import json

import numpy as np
import pytest

from hetdiff.checkpoint import (
    MAGIC,
    CheckpointFormatError,
    CheckpointLengthError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    encode,
    load_checkpoint,
    read_raw,
    save_checkpoint,
)
from hetdiff.errors import DataError
from hetdiff.graph import HeteroGraph
from hetdiff.training import TrainConfig, train


@pytest.fixture(scope="module")
def model():
    g = HeteroGraph(3, 4, [(0, 0), (0, 1), (1, 1), (2, 3), (2, 2)], ("da", "db", "dc"), ("g1", "g2", "g3", "g4"))
    return train(TrainConfig(dim=4, T=5, tau=2, batch_size=4, epochs=2, seed=3, margin_variant="corrected"), g).model


@pytest.fixture
def saved(tmp_path, model):
    path = tmp_path / "ckpt.bin"
    save_checkpoint(model, path)
    return path


def test_round_trip_is_bitwise(saved, model):
    loaded, config = load_checkpoint(saved)
    a, b = model.params.named_tensors(), loaded.params.named_tensors()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].values.tobytes() == b[k].values.tobytes(), k
    assert loaded.final_d.tobytes() == model.final_d.tobytes()
    assert loaded.final_g.tobytes() == model.final_g.tobytes()
    np.testing.assert_array_equal(loaded.drug_degree, model.drug_degree)
    assert (loaded.a_ids, loaded.b_ids) == (model.a_ids, model.b_ids)


def test_config_echo(saved, model):
    _, config = load_checkpoint(saved)
    assert config == model.config
    manifest, _ = read_raw(saved)
    assert manifest["config"] == model.config.to_dict()
    assert manifest["dim"] == 4 and manifest["counts"] == {"n_a": 3, "n_b": 4}


def test_loaded_model_predicts_identically(saved, model):
    loaded, _ = load_checkpoint(saved)
    pairs = np.array([[i, j] for i in range(3) for j in range(4)])
    np.testing.assert_array_equal(loaded.score_pairs(pairs, 1), model.score_pairs(pairs, 1))


def test_encoding_is_deterministic(model):
    assert encode(model) == encode(model)


def test_save_overwrites_atomically(saved, model):
    before = saved.read_bytes()
    save_checkpoint(model, saved)
    assert saved.read_bytes() == before
    assert [p.name for p in saved.parent.iterdir()] == [saved.name]


def rewrite_manifest(path, **changes):
    data = path.read_bytes()
    rest = data[len(MAGIC) :]
    nl = rest.index(b"\n")
    mlen = int(rest[:nl])
    manifest = json.loads(rest[nl + 1 : nl + 1 + mlen])
    manifest.update(changes)
    m = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + f"{len(m)}\n".encode() + m + rest[nl + 1 + mlen :])


def test_version_mismatch(saved):
    rewrite_manifest(saved, version=99)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(saved)


def test_truncated_payload_is_length_error(saved):
    saved.write_bytes(saved.read_bytes()[:-8])
    with pytest.raises(CheckpointLengthError):
        load_checkpoint(saved)


def test_trailing_bytes_are_length_error(saved):
    saved.write_bytes(saved.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointLengthError):
        load_checkpoint(saved)


def test_declared_length_disagreement(saved):
    manifest, _ = read_raw(saved)
    rewrite_manifest(saved, payload_bytes=manifest["payload_bytes"] + 8)
    with pytest.raises(CheckpointLengthError):
        load_checkpoint(saved)


@pytest.mark.parametrize("keep", [5, len(MAGIC) + 2, len(MAGIC) + 40])
def test_truncated_header_or_manifest(saved, keep):
    saved.write_bytes(saved.read_bytes()[:keep])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(saved)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_bad_format_tag(saved):
    rewrite_manifest(saved, format="other")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(saved)


def test_load_errors_are_distinct_data_errors():
    kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, CheckpointLengthError}
    assert all(issubclass(k, DataError) for k in kinds)
    assert len({k.__mro__[0] for k in kinds}) == 4
