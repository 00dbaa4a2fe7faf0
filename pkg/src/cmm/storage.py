"""Bit-exact binary persistence: feature stores, dataset files, checkpoints,
and the line-delimited metrics log.

All multi-byte fields are little-endian with fixed widths, so every format
round-trips byte-identically (write -> read -> write).
"""

from __future__ import annotations

import json
import struct

import numpy as np

FEATURE_MAGIC = b"CMMF"
DATASET_MAGIC = b"CMMD"
CHECKPOINT_MAGIC = b"CMMC"
FORMAT_VERSION = 1

MODALITY_TAGS = {"image": 0, "text": 1}
MODALITY_NAMES = {v: k for k, v in MODALITY_TAGS.items()}

_DTYPE_CODES = {0: np.float64, 1: np.int64}
_DTYPE_OF = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


class StorageError(ValueError):
    """Malformed or inconsistent persisted file."""


# ---------------------------------------------------------------- features

def write_feature_store(path, embeddings, identities, modality):
    """Header: magic 'CMMF', version u16, modality u8, count u32, dim u32;
    then count*dim little-endian f32 features, then count u32 identity ids."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != identities.shape[0]:
        raise StorageError("embeddings/identities shape mismatch")
    if modality not in MODALITY_TAGS:
        raise StorageError(f"unknown modality {modality!r}")
    count, dim = embeddings.shape
    feats = embeddings.astype("<f4")
    norms = np.linalg.norm(feats.astype(np.float64), axis=1)
    if count and np.max(np.abs(norms - 1.0)) > 1e-6:
        raise StorageError("feature store rows must be unit-norm within 1e-6")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HBII", FORMAT_VERSION, MODALITY_TAGS[modality], count, dim))
        f.write(feats.tobytes())
        f.write(identities.astype("<u4").tobytes())


def read_feature_store(path):
    """Returns (embeddings float64, identities int64, modality name)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise StorageError(f"{path}: not a feature store (bad magic)")
    version, tag, count, dim = struct.unpack_from("<HBII", blob, 4)
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    expected = 15 + 4 * count * dim + 4 * count
    if len(blob) != expected:
        raise StorageError(f"{path}: length {len(blob)} != expected {expected}")
    feats = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=15)
    feats = feats.reshape(count, dim).astype(np.float64)
    ids = np.frombuffer(blob, dtype="<u4", count=count,
                        offset=15 + 4 * count * dim).astype(np.int64)
    norms = np.linalg.norm(feats, axis=1)
    if count and np.max(np.abs(norms - 1.0)) > 1e-6:
        raise StorageError(f"{path}: stored vectors are not unit-norm")
    if tag not in MODALITY_NAMES:
        raise StorageError(f"{path}: unknown modality tag {tag}")
    return feats, ids, MODALITY_NAMES[tag]


# ----------------------------------------------------------------- dataset

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def write_dataset(path, dataset):
    from .synth_data import DataConfig  # noqa: F401  (documented layout owner)
    cfg = dataset.config
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack(
            "<10I d q", cfg.n_ids, cfg.n_val_ids, cfg.n_test_ids,
            cfg.images_per_id, cfg.captions_per_image, cfg.n_slots,
            cfg.n_choices, cfg.n_filler_tokens, cfg.fillers_per_caption,
            len(dataset.records), cfg.noise_sigma, cfg.seed))
        for ident in dataset.identities:
            f.write(np.asarray(ident.attributes, dtype="<u2").tobytes())
        for rec in dataset.records:
            f.write(struct.pack("<IIB", rec.identity, rec.image_index,
                                _SPLIT_CODES[rec.split]))
            f.write(np.asarray(rec.image_feature, dtype="<f8").tobytes())
            f.write(struct.pack("<H", len(rec.caption_tokens)))
            f.write(np.asarray(rec.caption_tokens, dtype="<u2").tobytes())


def read_dataset(path):
    from .synth_data import DataConfig, Identity, SampleRecord, SyntheticDataset
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise StorageError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    off = 6
    (n_ids, n_val, n_test, images_per_id, captions_per_image, n_slots,
     n_choices, n_filler, fillers_per_caption, n_records, noise_sigma,
     seed) = struct.unpack_from("<10I d q", blob, off)
    off += struct.calcsize("<10I d q")
    cfg = DataConfig(n_ids=n_ids, n_val_ids=n_val, n_test_ids=n_test,
                     images_per_id=images_per_id,
                     captions_per_image=captions_per_image, n_slots=n_slots,
                     n_choices=n_choices, noise_sigma=noise_sigma,
                     n_filler_tokens=n_filler,
                     fillers_per_caption=fillers_per_caption, seed=seed)
    identities = []
    for i in range(n_ids):
        attrs = np.frombuffer(blob, dtype="<u2", count=n_slots, offset=off)
        off += 2 * n_slots
        identities.append(Identity(id=i, attributes=tuple(int(a) for a in attrs)))
    input_dim = n_slots * n_choices
    records = []
    for _ in range(n_records):
        ident, image_index, split_code = struct.unpack_from("<IIB", blob, off)
        off += 9
        feat = np.frombuffer(blob, dtype="<f8", count=input_dim, offset=off).copy()
        off += 8 * input_dim
        (tok_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        toks = np.frombuffer(blob, dtype="<u2", count=tok_len, offset=off)
        off += 2 * tok_len
        records.append(SampleRecord(
            identity=int(ident), image_index=int(image_index),
            image_feature=feat, caption_tokens=[int(t) for t in toks],
            split=_SPLIT_NAMES[split_code]))
    if off != len(blob):
        raise StorageError(f"{path}: {len(blob) - off} trailing bytes")
    return SyntheticDataset(config=cfg, identities=identities, records=records)


# -------------------------------------------------------------- checkpoint

def _pack_rng_state(state):
    """PCG64 bit-generator state -> fixed 37 bytes."""
    inner = state["state"]
    return (inner["state"].to_bytes(16, "little")
            + inner["inc"].to_bytes(16, "little")
            + struct.pack("<BI", int(state["has_uint32"]), int(state["uinteger"])))


def _unpack_rng_state(buf):
    state = int.from_bytes(buf[:16], "little")
    inc = int.from_bytes(buf[16:32], "little")
    has_uint32, uinteger = struct.unpack_from("<BI", buf, 32)
    return {"bit_generator": "PCG64",
            "state": {"state": state, "inc": inc},
            "has_uint32": int(has_uint32), "uinteger": int(uinteger)}


def write_checkpoint(path, config_text, epoch, step, rng_state, arrays):
    """arrays: ordered name -> float64/int64 ndarray. Insertion order is the
    on-disk order, so save -> load -> save is byte-identical."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        cfg_bytes = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<QQ", epoch, step))
        f.write(_pack_rng_state(rng_state))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_OF:
                raise StorageError(f"array {name!r} has unsupported dtype {arr.dtype}")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", _DTYPE_OF[arr.dtype], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(path):
    """Returns (config_text, epoch, step, rng_state, arrays dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise StorageError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    off = 6
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_text = blob[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    epoch, step = struct.unpack_from("<QQ", blob, off)
    off += 16
    rng_state = _unpack_rng_state(blob[off:off + 37])
    off += 37
    (n_arrays,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        dtype = np.dtype(_DTYPE_CODES[dtype_code]).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        arrays[name] = arr.astype(_DTYPE_CODES[dtype_code]).reshape(shape)
    if off != len(blob):
        raise StorageError(f"{path}: {len(blob) - off} trailing bytes")
    return config_text, int(epoch), int(step), rng_state, arrays


# ------------------------------------------------------------- metrics log

_METRIC_FIELDS = ("epoch", "lcmc", "lalign", "lid", "total", "val_rank1", "lr")


def format_metrics_record(record):
    """One JSON line with a fixed key order; floats keep full repr precision."""
    return json.dumps({k: record[k] for k in _METRIC_FIELDS})


def parse_metrics_log(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]
