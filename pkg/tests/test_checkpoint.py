import numpy as np
import pytest

from LatentPrefPython import CHECKPOINT_ERROR, CHECKSUM_MISMATCH, CheckpointException, PathCollisionException
from tensor import RngStream
import Checkpoint
from Checkpoint import (
    KIND_DENOISER,
    KIND_LRM,
    RECORD_LATENT,
    RECORD_SCORED_PAIR,
    decodeCheckpoint,
    decodeDataset,
    encodeCheckpoint,
    encodeLatents,
    setChecksum,
    )
from lrm import FixedEncoder, Lrm
import mpcf


def frame():
    named = [("a", np.arange(6.0).reshape(2, 3)), ("b", np.array(-0.5)), ("c", np.array([1e-300, np.pi]))]
    return named, encodeCheckpoint(KIND_DENOISER, named, "run.seed=3\n", {"note": "x"})


def test_checkpoint_frame_round_trip():
    named, data = frame()
    assert data[:4] == b"LPRF"
    decoded = decodeCheckpoint(data, KIND_DENOISER)
    assert decoded["configEcho"] == "run.seed=3\n"
    assert decoded["meta"] == {"note": "x"}
    assert [n for n, _ in decoded["named"]] == ["a", "b", "c"]
    for (_, a), (_, b) in zip(named, decoded["named"]):
        assert a.shape == b.shape
        assert a.tobytes() == b.tobytes()


def test_every_corrupted_byte_is_detected():
    _, data = frame()
    for i in range(4, len(data)):
        corrupt = bytearray(data)
        corrupt[i] ^= 0x10
        with pytest.raises(CheckpointException) as info:
            decodeCheckpoint(bytes(corrupt))
        assert info.value.errorCode == CHECKSUM_MISMATCH, i


def test_bad_magic_and_kind():
    _, data = frame()
    with pytest.raises(CheckpointException) as info:
        decodeCheckpoint(b"XXXX" + data[4:])
    assert info.value.errorCode == CHECKPOINT_ERROR
    with pytest.raises(CheckpointException):
        decodeCheckpoint(data, KIND_LRM)
    with pytest.raises(CheckpointException):
        encodeCheckpoint(9, [])


def test_truncation_and_trailing_bytes():
    _, data = frame()
    with pytest.raises(CheckpointException) as info:
        decodeCheckpoint(data[:-9])
    assert info.value.errorCode == CHECKSUM_MISMATCH
    # a frame cut short but with a valid checksum
    with pytest.raises(CheckpointException, match = "Truncated"):
        decodeCheckpoint(setChecksum(data[:-12]))
    with pytest.raises(CheckpointException, match = "trailing"):
        decodeCheckpoint(setChecksum(data[:-4] + b"\x00\x00"))


def test_version_mismatch_is_rejected():
    _, data = frame()
    body = bytearray(data[:-4])
    body[4] = 2
    with pytest.raises(CheckpointException, match = "version"):
        decodeCheckpoint(setChecksum(bytes(body)))


def test_denoiser_save_and_load(tmp_path, tinyNet):
    path = str(tmp_path / "net.lprf")
    Checkpoint.saveDenoiser(path, tinyNet, "run.seed=1\n")
    loaded = Checkpoint.loadDenoiser(path)
    assert loaded.config == tinyNet.config
    for (na, a), (nb, b) in zip(tinyNet.namedParameters(), loaded.namedParameters()):
        assert na == nb
        assert a.values.tobytes() == b.values.tobytes()
    Checkpoint.saveDenoiser(str(tmp_path / "again.lprf"), loaded, "run.seed=1\n")
    assert Checkpoint.readBytes(path) == Checkpoint.readBytes(str(tmp_path / "again.lprf"))


def test_lrm_save_and_load(tmp_path, tinyNet, tinyConfig):
    encoder = FixedEncoder(np.eye(tinyConfig.channels) * 2.0)
    model = Lrm.fromDenoiser(tinyNet, RngStream(4).derive("head"), gs = 3.0, nD = 6, encoder = encoder)
    path = str(tmp_path / "lrm.lprf")
    Checkpoint.saveLrm(path, model)
    loaded = Checkpoint.loadLrm(path)
    assert loaded.gs == 3.0
    assert loaded.head.nD == 6
    assert loaded.encoder == encoder
    x = np.random.default_rng(0).standard_normal((3,) + tinyConfig.latentShape)
    assert np.array_equal(loaded.scoreArray(x, 100, 1), model.scoreArray(x, 100, 1))
    with pytest.raises(CheckpointException):
        Checkpoint.loadDenoiser(path)


def test_latent_dataset_round_trip():
    latents = np.random.default_rng(1).standard_normal((5, 2, 3, 3))
    ids = np.array([1, 2, 0, 4, 1])
    recordType, (outLatents, outIds) = decodeDataset(encodeLatents(latents, ids))
    assert recordType == RECORD_LATENT
    assert outLatents.tobytes() == latents.tobytes()
    assert list(outIds) == list(ids)


def test_scored_pair_dataset(tmp_path, task):
    corpus = mpcf.generateCorpus(task, 7, RngStream(2))
    path = str(tmp_path / "pairs.lpds")
    Checkpoint.writeDataset(path, Checkpoint.encodeScoredPairs(corpus), RECORD_SCORED_PAIR, task.config.latentShape)
    recordType, records = Checkpoint.readDataset(path)
    assert recordType == RECORD_SCORED_PAIR
    assert len(records) == 7
    for a, b in zip(corpus, records):
        assert (a.sAes, a.sClip, a.sVqa) == (b.sAes, b.sClip, b.sVqa)
        assert a.pair.cond.id == b.pair.cond.id
        assert np.array_equal(a.pair.x0Lose, b.pair.x0Lose)
    schema = open(path + ".schema").read()
    assert "LPDS version 1" in schema
    assert "s_vqa_lose" in schema


def test_writing_twice_is_a_collision(tmp_path):
    path = str(tmp_path / "latents.lpds")
    data = encodeLatents(np.zeros((1, 1, 2, 2)), [1])
    Checkpoint.writeDataset(path, data, RECORD_LATENT, (1, 2, 2))
    with pytest.raises(PathCollisionException):
        Checkpoint.writeDataset(path, data, RECORD_LATENT, (1, 2, 2))
    Checkpoint.writeDataset(path, data, RECORD_LATENT, (1, 2, 2), overwrite = True)


def test_empty_corpus_needs_a_shape():
    with pytest.raises(CheckpointException):
        Checkpoint.encodeScoredPairs([])
    recordType, records = decodeDataset(Checkpoint.encodeScoredPairs([], (1, 2, 2)))
    assert records == []
