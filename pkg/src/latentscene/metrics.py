"""Evaluation: per-concept/per-condition IoU, latent-space diagnostics
(temporal coherence and predictivity residual), latent interpolation, and
the imagery rollout loop.

All reductions run in a fixed order with 64-bit accumulators, so reports
are bit-deterministic for a given checkpoint, dataset and seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataio, nets, train
from . import tensor as T
from .errors import ConfigError, DataError, UsageError

CONDITION_ORDER = ("city", "freeway", "sunny", "dark")
CONDITION_LABELS = {"city": "City", "freeway": "Freeway", "sunny": "Sunny",
                    "dark": "Dark", "all": "All"}


def iou(predicted, target):
    """Intersection over union of two binary masks; empty vs empty is 1."""
    a = np.asarray(predicted)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise UsageError(f"mask shapes {a.shape} and {b.shape} do not match")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise UsageError("iou expects 0/1 valued masks")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def _check_trajectories(trajectories, min_length):
    if not trajectories:
        raise UsageError("no trajectories given")
    width = trajectories[0].shape[1]
    for i, t in enumerate(trajectories):
        if t.ndim != 2 or t.shape[1] != width:
            raise UsageError(f"trajectory {i} has shape {t.shape}")
        if t.shape[0] < min_length:
            raise UsageError(f"trajectory {i} has {t.shape[0]} steps,"
                             f" need >= {min_length}")
    return width


def temporal_coherence(trajectories):
    """Mean squared step between consecutive latents, variance-normalized.

    Zero for latents constant in time; 2 for i.i.d. unit-variance noise.
    """
    _check_trajectories(trajectories, 2)
    pooled = np.concatenate(trajectories, axis=0).astype(np.float64)
    variance = pooled.var(axis=0)
    dead = np.nonzero(variance <= 0)[0]
    if dead.size:
        raise DataError(f"latent dimension {int(dead[0])} has zero variance"
                        " over the dataset")
    steps = 0
    squared = np.zeros(pooled.shape[1], dtype=np.float64)
    for traj in trajectories:
        diff = np.diff(traj.astype(np.float64), axis=0)
        squared += (diff * diff).sum(axis=0)
        steps += diff.shape[0]
    return float(np.mean(squared / (steps * variance)))


def predictivity_residual(trajectories, subsample_seed=0, subsample_fraction=0.1):
    """Mean squared residual of the order-2 linear fit, per dimension.

    For each latent dimension, two consecutive values predict the third by
    least squares over a seeded row subsample; the residual mean square is
    averaged across dimensions. Near zero when the latents follow a linear
    order-2 recurrence; near 1 for i.i.d. unit-variance noise.
    """
    width = _check_trajectories(trajectories, 3)
    rows_z, rows_z1, rows_z2 = [], [], []
    for traj in trajectories:
        arr = traj.astype(np.float64)
        rows_z.append(arr[:-2])
        rows_z1.append(arr[1:-1])
        rows_z2.append(arr[2:])
    z = np.concatenate(rows_z, axis=0)
    z1 = np.concatenate(rows_z1, axis=0)
    z2 = np.concatenate(rows_z2, axis=0)
    total_rows = z.shape[0]
    keep = max(2, int(round(total_rows * subsample_fraction)))
    keep = min(keep, total_rows)
    rng = train.stream_rng(subsample_seed, 4)
    chosen = np.sort(rng.choice(total_rows, size=keep, replace=False))
    if chosen.size < 2:
        raise UsageError("need at least 2 rows to fit 2 regression unknowns")

    residuals = np.empty(width, dtype=np.float64)
    for i in range(width):
        a = np.stack([z[chosen, i], z1[chosen, i]], axis=1)
        b = z2[chosen, i]
        gram = a.T @ a
        rhs = a.T @ b
        try:
            w = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            w = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        err = a @ w - b
        residuals[i] = float(np.mean(err * err))
    return float(np.mean(residuals))


@dataclass
class LatentStats:
    variances: np.ndarray
    pair_count: int
    temporal_coherence: float
    predictivity_residual: float
    subsample_fraction: float = 0.1


def latent_stats(trajectories, subsample_seed=0, subsample_fraction=0.1):
    pooled = np.concatenate(trajectories, axis=0).astype(np.float64)
    return LatentStats(
        variances=pooled.var(axis=0),
        pair_count=sum(t.shape[0] - 1 for t in trajectories),
        temporal_coherence=temporal_coherence(trajectories),
        predictivity_residual=predictivity_residual(
            trajectories, subsample_seed, subsample_fraction),
        subsample_fraction=subsample_fraction,
    )


# ---------------------------------------------------------------------------
# Interpolation and imagery
# ---------------------------------------------------------------------------

def mix_latents(z_a, z_b, factor):
    """Convex combination (1-f)*a + f*b; factors 0 and 1 return the inputs."""
    return (1.0 - factor) * z_a + factor * z_b


def decode_latents(params, arch, latents):
    """Decode latent rows through every decoder present in `params`.

    Returns a list of dicts with the latent and the decoded rgb image and
    concept probability maps.
    """
    outputs = []
    with T.no_grad():
        for z_row in latents:
            z = T.Tensor(np.asarray(z_row, dtype=np.float32).reshape(1, -1))
            entry = {"latent": np.asarray(z_row, dtype=np.float32).reshape(-1)}
            if "dec_v.grid.w" in params:
                entry["rgb"] = nets.decode_visual(params, arch, z).data[0]
            if "dec_c.grid.w" in params:
                seg = nets.project_latent(arch.layout, z, "cars")
                entry["cars"] = nets.decode_concept(params, arch, seg, "cars").data[0, 0]
            if "dec_l.grid.w" in params:
                seg = nets.project_latent(arch.layout, z, "lanes")
                entry["lanes"] = nets.decode_concept(params, arch, seg, "lanes").data[0, 0]
            outputs.append(entry)
    return outputs


def interpolate(params, arch, frame_a, frame_b, steps):
    """Decode evenly spaced latent mixes between two frames' encodings.

    Produces `steps` intermediate frames; the endpoints themselves are
    excluded (factor k/(steps+1) for k = 1..steps).
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    for name, frame in (("frame_a", frame_a), ("frame_b", frame_b)):
        if np.asarray(frame).shape != (3, arch.resolution, arch.resolution):
            raise ConfigError(f"{name} has shape {np.asarray(frame).shape},"
                              f" expected (3, {arch.resolution}, {arch.resolution})")
    with T.no_grad():
        mu_a = nets.encode(params, arch, T.Tensor(
            np.asarray(frame_a, dtype=np.float32)[None]))[0].data[0]
        mu_b = nets.encode(params, arch, T.Tensor(
            np.asarray(frame_b, dtype=np.float32)[None]))[0].data[0]
    factors = [(k + 1) / (steps + 1) for k in range(steps)]
    latents = [mix_latents(mu_a, mu_b, f) for f in factors]
    frames = decode_latents(params, arch, latents)
    for entry, factor in zip(frames, factors):
        entry["factor"] = factor
    return frames


def imagery_rollout(params, arch, seed_latents, iterations):
    """Iterated prediction: each round keeps the first predicted latent and
    shifts it in as the newest input.

    Returns the `iterations` imagined latents in order.
    """
    if len(seed_latents) != arch.predictor_inputs:
        raise UsageError(f"rollout needs exactly {arch.predictor_inputs} seed"
                         f" latents, got {len(seed_latents)}")
    if iterations < 0:
        raise UsageError(f"iterations must be >= 0, got {iterations}")
    window = [np.asarray(z, dtype=np.float32).reshape(1, -1) for z in seed_latents]
    imagined = []
    with T.no_grad():
        for _ in range(iterations):
            inputs = [T.Tensor(z) for z in window]
            predicted = nets.sequence_predict(params, arch, inputs)[0].data
            window = window[1:] + [predicted]
            imagined.append(predicted.reshape(-1).copy())
    return imagined


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class IoUReport:
    """Pooled-count IoU per condition and concept.

    values[condition][concept] is a list with one entry per prediction
    horizon (a single entry for plain autoencoders). target_ratio carries
    the all-positive-prediction baseline for the same pooled counts.
    """
    values: dict = field(default_factory=dict)
    target_ratio: dict = field(default_factory=dict)
    horizons: int = 1

    def value(self, condition, concept, horizon=0):
        return self.values[condition][concept][horizon]

    def conditions(self):
        ordered = [c for c in CONDITION_ORDER if c in self.values]
        if "all" in self.values:
            ordered.append("all")
        return ordered


class _Counts:
    def __init__(self, horizons):
        self.inter = {}
        self.union = {}
        self.true = {}
        self.pixels = {}
        self.horizons = horizons

    def add(self, condition, concept, horizon, predicted, target):
        key = (condition, concept, horizon)
        p = predicted.astype(bool)
        t = target.astype(bool)
        self.inter[key] = self.inter.get(key, 0) + int(np.count_nonzero(p & t))
        self.union[key] = self.union.get(key, 0) + int(np.count_nonzero(p | t))
        self.true[key] = self.true.get(key, 0) + int(np.count_nonzero(t))
        self.pixels[key] = self.pixels.get(key, 0) + t.size

    def report(self):
        report = IoUReport(horizons=self.horizons)
        conditions = sorted({c for c, _, _ in self.inter})
        for condition in conditions + ["all"]:
            per_concept = {}
            ratios = {}
            for concept in ("cars", "lanes"):
                series = []
                ratio_series = []
                for h in range(self.horizons):
                    keys = ([(condition, concept, h)] if condition != "all"
                            else [(c, concept, h) for c in conditions])
                    inter = sum(self.inter.get(k, 0) for k in keys)
                    union = sum(self.union.get(k, 0) for k in keys)
                    true = sum(self.true.get(k, 0) for k in keys)
                    pixels = sum(self.pixels.get(k, 0) for k in keys)
                    series.append(1.0 if union == 0 else inter / union)
                    ratio_series.append(0.0 if pixels == 0 else true / pixels)
                per_concept[concept] = series
                ratios[concept] = ratio_series
            report.values[condition] = per_concept
            report.target_ratio[condition] = ratios
        return report


def evaluate_autoencoder(params, arch, dataset, indices, threshold=0.5):
    """IoU of thresholded concept maps against ground truth, by condition."""
    counts = _Counts(horizons=1)
    with T.no_grad():
        for index in indices:
            seq = dataset.sequences[int(index)]
            mu = train.encode_sequence_means(params, arch, seq.rgb)
            for concept, target in (("cars", seq.car), ("lanes", seq.lane)):
                start, stop = arch.layout.segment(concept)
                maps = _decode_concept_batch(params, arch, mu[:, start:stop], concept)
                predicted = nets.binarize(maps, threshold)[:, 0]
                counts.add(seq.condition, concept, 0, predicted, target)
    return counts.report()


def _decode_concept_batch(params, arch, segments, concept, chunk=64):
    outs = []
    for start in range(0, segments.shape[0], chunk):
        z = T.Tensor(segments[start:start + chunk].astype(np.float32, copy=False))
        outs.append(nets.decode_concept(params, arch, z, concept).data)
    return np.concatenate(outs, axis=0)


def evaluate_predictor(predictor_params, autoencoder_params, arch, dataset,
                       indices, threshold=0.5):
    """Per-horizon IoU of masks decoded from predicted latents."""
    n_in, n_out = arch.predictor_inputs, arch.predictor_outputs
    window = n_in + n_out
    counts = _Counts(horizons=n_out)
    with T.no_grad():
        for index in indices:
            seq = dataset.sequences[int(index)]
            if len(seq) < window:
                continue
            mu = train.encode_sequence_means(autoencoder_params, arch, seq.rgb)
            starts = list(range(0, len(seq) - window + 1))
            inputs = [T.Tensor(np.stack([mu[s + t] for s in starts]))
                      for t in range(n_in)]
            predicted = nets.sequence_predict(predictor_params, arch, inputs)
            for h in range(n_out):
                for concept, target_all in (("cars", seq.car), ("lanes", seq.lane)):
                    start, stop = arch.layout.segment(concept)
                    maps = _decode_concept_batch(
                        autoencoder_params, arch,
                        predicted[h].data[:, start:stop], concept)
                    masks = nets.binarize(maps, threshold)[:, 0]
                    targets = np.stack([target_all[s + n_in + h] for s in starts])
                    counts.add(seq.condition, concept, h, masks, targets)
    return counts.report()


def evaluate_latents(params, arch, dataset, indices, subsample_seed=0):
    """Latent diagnostics over the encoded frames of the given sequences."""
    trajectories = [train.encode_sequence_means(params, arch,
                                                dataset.sequences[int(i)].rgb)
                    for i in indices]
    return latent_stats(trajectories, subsample_seed=subsample_seed)


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def write_iou_csv(path, report):
    """One row per condition; one IoU column per concept and horizon."""
    columns = ["condition"]
    for h in range(report.horizons):
        suffix = "" if report.horizons == 1 else f"_f{h + 9}"
        columns += [f"iou_cars{suffix}", f"iou_lanes{suffix}"]
    lines = [",".join(columns)]
    for condition in report.conditions():
        row = [CONDITION_LABELS[condition]]
        for h in range(report.horizons):
            row.append(f"{report.value(condition, 'cars', h):.6f}")
            row.append(f"{report.value(condition, 'lanes', h):.6f}")
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_latent_stats_csv(path, stats):
    with open(path, "w") as fh:
        fh.write("temporal_coherence,predictivity_residual,pair_count,"
                 "subsample_fraction\n")
        fh.write(f"{stats.temporal_coherence:.8g},"
                 f"{stats.predictivity_residual:.8g},"
                 f"{stats.pair_count},{stats.subsample_fraction}\n")


def write_ppm(path, rgb):
    """Plain binary PPM (P6) dump of a (3,H,W) float image in [0,1]."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise UsageError(f"expected a (3,H,W) image, got {arr.shape}")
    byte_view = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    height, width = arr.shape[1], arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(byte_view.transpose(1, 2, 0).tobytes())
