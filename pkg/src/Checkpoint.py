# File: Checkpoint.py
# Binary frames for model checkpoints (LPRF) and datasets (LPDS).
#
# Everything is little-endian. Every frame ends with the CRC32 of all the
# bytes before it.
#
# Checkpoint:
#   "LPRF" | version u32 | kind u8 | echo len u32 | echo utf-8
#          | meta len u32 | meta json utf-8 | count u32
#          | count x ( name len u16 | name | ndim u8 | dims u32... | f64 payload )
#          | crc32 u32
#
# Dataset:
#   "LPDS" | version u32 | record type u8 | dtype u8 | count u32
#          | ndim u8 | dims u32... | score dims u8
#          | count x record | crc32 u32
#   latent record:      cond i32 | latent f64...
#   scored pair record: cond i32 | win f64... | lose f64... | scores f64 x 6

import json
import os
import zlib

from struct import calcsize, pack, unpack, unpack_from

import numpy as np

from LatentPrefPython import (
    CHECKSUM_MISMATCH,
    CheckpointException,
    PathCollisionException,
    )


CHECKPOINT_MAGIC = b"LPRF"
DATASET_MAGIC = b"LPDS"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1

KIND_DENOISER = 1
KIND_LRM = 2
KIND_NAMES = {KIND_DENOISER: "denoiser", KIND_LRM: "lrm"}

RECORD_LATENT = 1
RECORD_SCORED_PAIR = 2
DTYPE_F64 = 1
SCORE_DIMS = 6

CRC_LENGTH = 4


def setChecksum(payload):
    """Returns payload with its CRC32 appended."""
    return payload + pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def verifyChecksum(buffer):
    """True when the trailing CRC32 matches the bytes before it."""
    if len(buffer) < CRC_LENGTH:
        return False
    stored, = unpack("<I", buffer[-CRC_LENGTH:])
    return stored == (zlib.crc32(buffer[:-CRC_LENGTH]) & 0xFFFFFFFF)


class _Reader(object):
    def __init__(self, buffer, what):
        self.buffer = buffer
        self.offset = 0
        self.what = what

    def take(self, fmt):
        size = calcsize(fmt)
        if self.offset + size > len(self.buffer) - CRC_LENGTH:
            raise CheckpointException("Truncated %s." % self.what)
        values = unpack_from(fmt, self.buffer, self.offset)
        self.offset += size
        return values

    def bytes(self, n):
        if self.offset + n > len(self.buffer) - CRC_LENGTH:
            raise CheckpointException("Truncated %s." % self.what)
        out = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return out

    def array(self, shape):
        count = int(np.prod(shape)) if shape else 1
        data = self.bytes(8 * count)
        return np.frombuffer(data, dtype = "<f8").reshape(shape).astype(np.float64)

    def finish(self):
        if self.offset != len(self.buffer) - CRC_LENGTH:
            raise CheckpointException("%s bytes of trailing data in %s." % (len(self.buffer) - CRC_LENGTH - self.offset, self.what))


def _verify(buffer, magic, what):
    if len(buffer) < len(magic) + CRC_LENGTH or buffer[:len(magic)] != magic:
        raise CheckpointException("Not a %s (bad magic)." % what)
    if not verifyChecksum(buffer):
        raise CheckpointException(ec = CHECKSUM_MISMATCH)


def _shapeBytes(shape):
    return pack("<B", len(shape)) + b"".join(pack("<I", n) for n in shape)


def encodeCheckpoint(kind, named, configEcho = "", meta = None):
    """
    Name: encodeCheckpoint(kind, named, configEcho = "", meta = None)
    Args: kind, KIND_DENOISER or KIND_LRM
          named, list of (name, array) in a fixed order
          configEcho, text of the run configuration
          meta, json-serializable architecture description
    Desc: The LPRF frame as bytes.
    """
    if kind not in KIND_NAMES:
        raise CheckpointException("Unknown checkpoint kind %s." % kind)
    echo = configEcho.encode("utf-8")
    metaBytes = json.dumps(meta if meta is not None else {}, sort_keys = True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, pack("<IB", CHECKPOINT_VERSION, kind),
             pack("<I", len(echo)), echo, pack("<I", len(metaBytes)), metaBytes,
             pack("<I", len(named))]
    for name, values in named:
        values = np.asarray(values.values if hasattr(values, "values") else values, dtype = np.float64)
        nameBytes = name.encode("utf-8")
        parts.append(pack("<H", len(nameBytes)) + nameBytes)
        parts.append(_shapeBytes(values.shape))
        parts.append(np.ascontiguousarray(values, dtype = "<f8").tobytes())
    return setChecksum(b"".join(parts))


def decodeCheckpoint(buffer, expectedKind = None):
    """
    Name: decodeCheckpoint(buffer, expectedKind = None)
    Desc: Returns dict(kind, version, configEcho, meta, named). Raises
          CheckpointException on a bad magic, version or kind and on a CRC
          mismatch (CHECKSUM_MISMATCH).
    """
    _verify(buffer, CHECKPOINT_MAGIC, "checkpoint")
    r = _Reader(buffer, "checkpoint")
    r.bytes(len(CHECKPOINT_MAGIC))
    version, kind = r.take("<IB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointException("Checkpoint format version %s, this build reads version %s." % (version, CHECKPOINT_VERSION))
    if kind not in KIND_NAMES:
        raise CheckpointException("Unknown checkpoint kind %s." % kind)
    if expectedKind is not None and kind != expectedKind:
        raise CheckpointException("Expected a %s checkpoint, found %s." % (KIND_NAMES[expectedKind], KIND_NAMES[kind]))
    echo = r.bytes(r.take("<I")[0]).decode("utf-8")
    meta = json.loads(r.bytes(r.take("<I")[0]).decode("utf-8"))
    named = []
    for _ in range(r.take("<I")[0]):
        name = r.bytes(r.take("<H")[0]).decode("utf-8")
        ndim, = r.take("<B")
        shape = r.take("<%dI" % ndim) if ndim else ()
        named.append((name, r.array(tuple(shape))))
    r.finish()
    return {"kind": kind, "version": version, "configEcho": echo, "meta": meta, "named": named}


def writeNew(path, data, overwrite = True):
    """Writes bytes to path; with overwrite False an existing file raises PathCollisionException."""
    if not overwrite and os.path.exists(path):
        raise PathCollisionException(path)
    directory = os.path.dirname(path)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    with open(path, "wb") as f:
        f.write(data)


def readBytes(path):
    with open(path, "rb") as f:
        return f.read()


# Models ---------------------------------------------------------------------------

def saveDenoiser(path, net, configEcho = ""):
    meta = {"denoiser": net.config.asDict()}
    writeNew(path, encodeCheckpoint(KIND_DENOISER, net.namedParameters(), configEcho, meta))


def loadDenoiser(path):
    from denoiser import Denoiser, DenoiserConfig
    frame = decodeCheckpoint(readBytes(path), KIND_DENOISER)
    net = Denoiser(DenoiserConfig(**frame["meta"]["denoiser"]))
    net.loadNamedParameters(frame["named"])
    return net


def saveLrm(path, model, configEcho = ""):
    from lrm import FEATURE_ORDER
    meta = {
        "backbone": model.backbone.config.asDict(),
        "gs": model.gs,
        "nD": model.head.nD,
        "featureOrder": FEATURE_ORDER,
        "encoder": None if model.encoder.matrix is None else model.encoder.matrix.tolist(),
        }
    writeNew(path, encodeCheckpoint(KIND_LRM, model.namedParameters(), configEcho, meta))


def loadLrm(path):
    from denoiser import Denoiser, DenoiserConfig
    from lrm import FEATURE_ORDER, FixedEncoder, Lrm, LrmHead
    frame = decodeCheckpoint(readBytes(path), KIND_LRM)
    meta = frame["meta"]
    if meta.get("featureOrder") != FEATURE_ORDER:
        raise CheckpointException("Reward checkpoint feature order %r, expected %r." % (meta.get("featureOrder"), FEATURE_ORDER))
    config = DenoiserConfig(**meta["backbone"])
    backbone = Denoiser(config)
    backbone.loadNamedParameters([(k[len("backbone."):], v) for k, v in frame["named"] if k.startswith("backbone.")])
    model = Lrm(backbone, LrmHead(config.nP, config.featureDim, meta["nD"]), meta["gs"], FixedEncoder(meta["encoder"]))
    model.loadNamedParameters(frame["named"])
    return model


# Datasets ---------------------------------------------------------------------------

def _datasetHeader(recordType, count, shape, scoreDims):
    return (DATASET_MAGIC + pack("<IBBI", DATASET_VERSION, recordType, DTYPE_F64, count)
            + _shapeBytes(shape) + pack("<B", scoreDims))


def encodeLatents(latents, condIds):
    """LPDS frame of (cond id, latent) records."""
    latents = np.asarray(latents, dtype = np.float64)
    condIds = np.asarray(condIds, dtype = np.int64)
    parts = [_datasetHeader(RECORD_LATENT, latents.shape[0], latents.shape[1:], 0)]
    for i in range(latents.shape[0]):
        parts.append(pack("<i", int(condIds[i])))
        parts.append(np.ascontiguousarray(latents[i], dtype = "<f8").tobytes())
    return setChecksum(b"".join(parts))


def encodeScoredPairs(scoredPairs, shape = None):
    """LPDS frame of scored-pair records."""
    if shape is None:
        if not scoredPairs:
            raise CheckpointException("Can't infer the latent shape of an empty corpus.")
        shape = scoredPairs[0].pair.x0Win.shape
    parts = [_datasetHeader(RECORD_SCORED_PAIR, len(scoredPairs), tuple(shape), SCORE_DIMS)]
    for sp in scoredPairs:
        parts.append(pack("<i", sp.pair.cond.id))
        parts.append(np.ascontiguousarray(sp.pair.x0Win, dtype = "<f8").tobytes())
        parts.append(np.ascontiguousarray(sp.pair.x0Lose, dtype = "<f8").tobytes())
        parts.append(pack("<6d", sp.sAes[0], sp.sAes[1], sp.sClip[0], sp.sClip[1], sp.sVqa[0], sp.sVqa[1]))
    return setChecksum(b"".join(parts))


def decodeDataset(buffer):
    """
    Name: decodeDataset(buffer)
    Desc: Returns (recordType, records). Latent frames give
          (latents [n, ...], condIds [n]); scored-pair frames give a list of
          mpcf.ScoredPair.
    """
    _verify(buffer, DATASET_MAGIC, "dataset")
    r = _Reader(buffer, "dataset")
    r.bytes(len(DATASET_MAGIC))
    version, recordType, dtype, count = r.take("<IBBI")
    if version != DATASET_VERSION:
        raise CheckpointException("Dataset format version %s, this build reads version %s." % (version, DATASET_VERSION))
    if dtype != DTYPE_F64:
        raise CheckpointException("Unsupported dataset dtype tag %s." % dtype)
    ndim, = r.take("<B")
    shape = tuple(r.take("<%dI" % ndim)) if ndim else ()
    scoreDims, = r.take("<B")

    if recordType == RECORD_LATENT:
        latents = np.zeros((count,) + shape)
        condIds = np.zeros(count, dtype = np.int64)
        for i in range(count):
            condIds[i], = r.take("<i")
            latents[i] = r.array(shape)
        r.finish()
        return recordType, (latents, condIds)

    if recordType == RECORD_SCORED_PAIR:
        if scoreDims != SCORE_DIMS:
            raise CheckpointException("Scored-pair records need %s score dims, found %s." % (SCORE_DIMS, scoreDims))
        from lrm import PreferencePair
        from mpcf import ScoredPair
        records = []
        for _ in range(count):
            condId, = r.take("<i")
            win = r.array(shape)
            lose = r.array(shape)
            aw, al, cw, cl, vw, vl = r.take("<6d")
            records.append(ScoredPair(PreferencePair(win, lose, condId), (aw, al), (cw, cl), (vw, vl)))
        r.finish()
        return recordType, records

    raise CheckpointException("Unknown dataset record type %s." % recordType)


def datasetSchema(recordType, shape):
    """Plain-text sidecar describing an LPDS file."""
    dims = " x ".join(str(n) for n in shape)
    lines = [
        "format: LPDS version %s, little-endian, crc32 trailer" % DATASET_VERSION,
        "latent: f64 %s" % dims,
        ]
    if recordType == RECORD_LATENT:
        lines.append("record: cond_id i32 | latent")
    else:
        lines.append("record: cond_id i32 | x0_win latent | x0_lose latent | s_aes_win s_aes_lose s_clip_win s_clip_lose s_vqa_win s_vqa_lose f64")
    return "\n".join(lines) + "\n"


def writeDataset(path, data, recordType, shape, overwrite = False):
    """Writes an LPDS frame plus its .schema sidecar. Refuses to overwrite by default."""
    schemaPath = path + ".schema"
    if not overwrite:
        for p in (path, schemaPath):
            if os.path.exists(p):
                raise PathCollisionException(p)
    writeNew(path, data)
    writeNew(schemaPath, datasetSchema(recordType, shape).encode("utf-8"))


def readDataset(path):
    return decodeDataset(readBytes(path))
