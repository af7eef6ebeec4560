"""Binary containers for datasets, latent trajectories and checkpoints.

All three formats are little-endian regardless of platform, carry a 4-byte
magic plus a version word, and round-trip byte-identically. Offsets in the
index tables are bytes from the start of the file.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, UsageError

DATASET_MAGIC = b"LSDS"
LATENT_MAGIC = b"LSLT"
CHECKPOINT_MAGIC = b"LSCK"
FORMAT_VERSION = 1

CONDITION_CODES = {"sunny": 0, "dark": 1, "city": 2, "freeway": 3}
CONDITION_NAMES = {v: k for k, v in CONDITION_CODES.items()}

MODEL_KIND_CODES = {"net1": 1, "net2": 2, "net3": 3, "net4": 4}
MODEL_KIND_NAMES = {v: k for k, v in MODEL_KIND_CODES.items()}

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


@dataclass
class SequenceRecord:
    """One driving sequence as stored on disk."""
    rgb: np.ndarray        # (L, 3, R, R) float32 in [0, 1]
    car: np.ndarray        # (L, R, R) uint8 in {0, 1}
    lane: np.ndarray       # (L, R, R) uint8 in {0, 1}
    condition: str

    def __len__(self):
        return self.rgb.shape[0]


@dataclass
class Dataset:
    resolution: int
    sequences: list

    def __len__(self):
        return len(self.sequences)

    @property
    def frame_count(self):
        return sum(len(s) for s in self.sequences)


def _take(buf, offset, size, what):
    if offset + size > len(buf):
        raise DataError(f"truncated file while reading {what}")
    return buf[offset:offset + size], offset + size


def _frame_size(resolution):
    return 12 * resolution * resolution + 2 * resolution * resolution + 1


# ---------------------------------------------------------------------------
# Dataset container (LSDS)
# ---------------------------------------------------------------------------

def sequences_to_records(sequences):
    """Adapt scene sequences (frames/car_masks/lane_masks lists) to records."""
    records = []
    for seq in sequences:
        records.append(SequenceRecord(
            rgb=np.stack(seq.frames).astype(_F32),
            car=np.stack(seq.car_masks).astype(_U8),
            lane=np.stack(seq.lane_masks).astype(_U8),
            condition=seq.condition,
        ))
    return records


def save_dataset(path, records):
    if not records:
        raise UsageError("cannot save an empty dataset")
    resolution = records[0].rgb.shape[-1]
    for rec in records:
        if rec.rgb.shape[1:] != (3, resolution, resolution):
            raise DataError(f"sequence frame shape {rec.rgb.shape[1:]} does not"
                            f" match resolution {resolution}")
        if rec.condition not in CONDITION_CODES:
            raise DataError(f"unknown condition {rec.condition!r}")
        for mask in (rec.car, rec.lane):
            if not np.isin(mask, (0, 1)).all():
                raise DataError("masks must be exactly 0/1 valued")
    frame_count = sum(len(r) for r in records)
    header_size = 20 + 12 * len(records)
    chunks = [DATASET_MAGIC,
              struct.pack("<IIII", FORMAT_VERSION, resolution, len(records), frame_count)]
    offset = header_size
    fsize = _frame_size(resolution)
    for rec in records:
        chunks.append(struct.pack("<QI", offset, len(rec)))
        offset += fsize * len(rec)
    for rec in records:
        code = np.full((len(rec), 1), CONDITION_CODES[rec.condition], dtype=_U8)
        rgb = rec.rgb.astype(_F32).reshape(len(rec), -1).view(_U8)
        body = np.concatenate(
            [rgb, rec.car.reshape(len(rec), -1).astype(_U8),
             rec.lane.reshape(len(rec), -1).astype(_U8), code], axis=1)
        chunks.append(body.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    head, pos = _take(buf, 0, 20, "dataset header")
    if head[:4] != DATASET_MAGIC:
        raise DataError(f"{path}: not a dataset file (magic {head[:4]!r})")
    version, resolution, seq_count, frame_count = struct.unpack("<IIII", head[4:])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    index = []
    for i in range(seq_count):
        entry, pos = _take(buf, pos, 12, f"index entry {i}")
        index.append(struct.unpack("<QI", entry))
    fsize = _frame_size(resolution)
    expected = pos
    total = 0
    for i, (off, length) in enumerate(index):
        if off != expected:
            raise DataError(f"{path}: sequence {i} offset {off} is not contiguous"
                            f" and increasing (expected {expected})")
        expected = off + fsize * length
        total += length
    if total != frame_count or expected != len(buf):
        raise DataError(f"{path}: declared counts do not match payload size")

    sequences = []
    rr = resolution * resolution
    for off, length in index:
        block = np.frombuffer(buf, dtype=_U8, count=fsize * length, offset=off)
        block = block.reshape(length, fsize)
        rgb = block[:, :12 * rr].reshape(length * 12 * rr).view(_F32)
        rgb = rgb.reshape(length, 3, resolution, resolution).copy()
        car = block[:, 12 * rr:13 * rr].reshape(length, resolution, resolution).copy()
        lane = block[:, 13 * rr:14 * rr].reshape(length, resolution, resolution).copy()
        codes = np.unique(block[:, -1])
        if len(codes) != 1 or int(codes[0]) not in CONDITION_NAMES:
            raise DataError(f"{path}: invalid condition tags {codes}")
        sequences.append(SequenceRecord(rgb=rgb, car=car, lane=lane,
                                        condition=CONDITION_NAMES[int(codes[0])]))
    return Dataset(resolution=resolution, sequences=sequences)


# ---------------------------------------------------------------------------
# Latent trajectories (LSLT)
# ---------------------------------------------------------------------------

def save_latents(path, n_total, n_cars, n_lanes, trajectories):
    if not trajectories:
        raise UsageError("cannot save an empty latent file")
    for i, traj in enumerate(trajectories):
        if traj.ndim != 2 or traj.shape[1] != n_total:
            raise DataError(f"trajectory {i} has shape {traj.shape}, expected"
                            f" (*, {n_total})")
        if traj.shape[0] < 3:
            raise DataError(f"trajectory {i} has {traj.shape[0]} steps; prediction"
                            " diagnostics need at least 3")
    total = sum(t.shape[0] for t in trajectories)
    header_size = 28 + 12 * len(trajectories)
    chunks = [LATENT_MAGIC,
              struct.pack("<IIIIII", FORMAT_VERSION, n_total, n_cars, n_lanes,
                          len(trajectories), total)]
    offset = header_size
    for traj in trajectories:
        chunks.append(struct.pack("<QI", offset, traj.shape[0]))
        offset += 4 * n_total * traj.shape[0]
    for traj in trajectories:
        chunks.append(np.ascontiguousarray(traj, dtype=_F32).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_latents(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    head, pos = _take(buf, 0, 28, "latent header")
    if head[:4] != LATENT_MAGIC:
        raise DataError(f"{path}: not a latent trajectory file (magic {head[:4]!r})")
    version, n_total, n_cars, n_lanes, count, total = struct.unpack("<IIIIII", head[4:])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported latent file version {version}")
    index = []
    for i in range(count):
        entry, pos = _take(buf, pos, 12, f"trajectory index {i}")
        index.append(struct.unpack("<QI", entry))
    expected = pos
    seen = 0
    trajectories = []
    for i, (off, length) in enumerate(index):
        if off != expected:
            raise DataError(f"{path}: trajectory {i} offset {off} is not contiguous"
                            f" and increasing (expected {expected})")
        if length < 3:
            raise DataError(f"{path}: trajectory {i} shorter than 3 steps")
        vecs = np.frombuffer(buf, dtype=_F32, count=length * n_total, offset=off)
        trajectories.append(vecs.reshape(length, n_total).copy())
        expected = off + 4 * n_total * length
        seen += length
    if seen != total or expected != len(buf):
        raise DataError(f"{path}: declared counts do not match payload size")
    return (n_total, n_cars, n_lanes), trajectories


# ---------------------------------------------------------------------------
# Checkpoints (LSCK)
# ---------------------------------------------------------------------------

def config_digest(description):
    """Stable digest of an architecture description string."""
    return hashlib.sha256(description.encode("utf-8")).digest()


def save_checkpoint(path, kind, digest, params, epoch, batch_counter, opt_state=None):
    if kind not in MODEL_KIND_CODES:
        raise UsageError(f"unknown model kind {kind!r}")
    if len(digest) != 32:
        raise UsageError("digest must be 32 bytes (sha-256)")
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<IB", FORMAT_VERSION, MODEL_KIND_CODES[kind]),
              bytes(digest),
              struct.pack("<IQI", epoch, batch_counter, len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=_F32).tobytes())
    if opt_state is None:
        chunks.append(struct.pack("<B", 0))
    else:
        # Untrained blocks (e.g. stored normalization constants) carry no
        # moments; a per-parameter flag keeps the layout self-describing.
        step, moments = opt_state
        chunks.append(struct.pack("<BQ", 1, step))
        for name, value in params.items():
            if name in moments:
                m, v = moments[name]
                chunks.append(struct.pack("<B", 1))
                chunks.append(np.ascontiguousarray(m, dtype=_F32).tobytes())
                chunks.append(np.ascontiguousarray(v, dtype=_F32).tobytes())
            else:
                chunks.append(struct.pack("<B", 0))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, expected_digest=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    head, pos = _take(buf, 0, 9, "checkpoint header")
    if head[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (magic {head[:4]!r})")
    version, kind_code = struct.unpack("<IB", head[4:])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if kind_code not in MODEL_KIND_NAMES:
        raise DataError(f"{path}: unknown model kind code {kind_code}")
    digest, pos = _take(buf, pos, 32, "config digest")
    if expected_digest is not None and bytes(digest) != bytes(expected_digest):
        raise DataError(f"{path}: checkpoint was trained with a different"
                        " architecture configuration (digest mismatch)")
    meta, pos = _take(buf, pos, 16, "checkpoint counters")
    epoch, batch_counter, param_count = struct.unpack("<IQI", meta)
    params = {}
    for _ in range(param_count):
        raw, pos = _take(buf, pos, 2, "parameter name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, name_len, "parameter name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 1, "parameter rank")
        ndim = raw[0]
        raw, pos = _take(buf, pos, 4 * ndim, "parameter shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw, pos = _take(buf, pos, 4 * size, f"parameter {name}")
        params[name] = np.frombuffer(raw, dtype=_F32).reshape(shape).copy()
    raw, pos = _take(buf, pos, 1, "optimizer flag")
    opt_state = None
    if raw[0] == 1:
        raw, pos = _take(buf, pos, 8, "optimizer step")
        (step,) = struct.unpack("<Q", raw)
        moments = {}
        for name, value in params.items():
            raw, pos = _take(buf, pos, 1, f"moment flag of {name}")
            if raw[0] == 0:
                continue
            raw, pos = _take(buf, pos, 4 * value.size, f"moment m of {name}")
            m = np.frombuffer(raw, dtype=_F32).reshape(value.shape).copy()
            raw, pos = _take(buf, pos, 4 * value.size, f"moment v of {name}")
            v = np.frombuffer(raw, dtype=_F32).reshape(value.shape).copy()
            moments[name] = (m, v)
        opt_state = (step, moments)
    elif raw[0] != 0:
        raise DataError(f"{path}: invalid optimizer flag {raw[0]}")
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return {
        "kind": MODEL_KIND_NAMES[kind_code],
        "digest": bytes(digest),
        "epoch": epoch,
        "batch_counter": batch_counter,
        "params": params,
        "opt_state": opt_state,
    }


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------

def split(sequence_count, fractions, seed):
    """Partition sequence indices into train/val/test index arrays.

    Splitting is by whole sequence. Cut points come from cumulative
    rounding, then any empty part with a nonzero fraction steals one
    sequence from the largest part.
    """
    if len(fractions) != 3:
        raise UsageError(f"expected 3 fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be nonnegative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1.0, got {sum(fractions)}")
    nonzero = sum(1 for f in fractions if f > 0)
    if sequence_count < nonzero:
        raise UsageError(f"{sequence_count} sequences cannot fill {nonzero}"
                         " nonzero partitions")
    sizes = []
    assigned = 0
    cum = 0.0
    for f in fractions:
        cum += f
        boundary = int(round(cum * sequence_count))
        sizes.append(boundary - assigned)
        assigned = boundary
    for i, f in enumerate(fractions):
        if f > 0 and sizes[i] == 0:
            donor = max(range(3), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 3]))
    order = rng.permutation(sequence_count)
    parts = []
    start = 0
    for size in sizes:
        parts.append(np.sort(order[start:start + size]))
        start += size
    return tuple(parts)


def windows_for(sequence_lengths, indices, window, stride):
    """All (sequence, start) windows inside the selected sequences.

    Windows never cross a sequence boundary.
    """
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1, got {window}/{stride}")
    selected = [int(i) for i in indices]
    for i in selected:
        if window > sequence_lengths[i]:
            raise ConfigError(f"window {window} exceeds sequence {i} length"
                              f" {sequence_lengths[i]}")
    out = []
    for i in selected:
        for start in range(0, sequence_lengths[i] - window + 1, stride):
            out.append((i, start))
    return out


def shuffle_windows(windows, seed, epoch):
    """Deterministic per-epoch shuffle of a window list."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 2, epoch]))
    order = rng.permutation(len(windows))
    return [windows[int(i)] for i in order]


def batch_windows(sequence_lengths, indices, window, stride, seed, epoch):
    """Shuffled windows for one epoch (deterministic in seed and epoch)."""
    return shuffle_windows(windows_for(sequence_lengths, indices, window, stride),
                           seed, epoch)
