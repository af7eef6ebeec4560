"""Optimization loop, checkpointing, and latent export.

Determinism contract: every random draw derives from the config seed plus
a stream tag and the (epoch, step) coordinates, so resuming from a
checkpoint reproduces the exact trajectory of an unbroken run (parameter
initialization, shuffles, and reparameterization noise included).
"""
from __future__ import annotations

import csv
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, losses, nets, scenes
from . import tensor as T
from .errors import ConfigError, NumericError, UsageError

TERM_COLUMNS = {
    "net1": ("E_K", "E_V"),
    "net2": ("E_K", "E_V", "E_C", "E_L"),
    "net3": ("E_K", "E_V", "E_C", "E_L", "Ep_V", "Ep_C", "Ep_L",
             "Epp_V", "Epp_C", "Epp_L"),
    "net4": ("mse",),
}


def stream_rng(seed, tag, *coords):
    """Generator for one independent, resumable random stream."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & (2**63 - 1), tag, *coords]))


@dataclass(frozen=True)
class TrainConfig:
    model: str = "net2"
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    grad_clip: float = 5.0
    fractions: tuple = (0.70, 0.25, 0.05)
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    anneal: losses.AnnealSchedule = field(default_factory=losses.AnnealSchedule)
    smoothing: float = 4.0

    def validate(self):
        if self.model not in TERM_COLUMNS:
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        finite_positive = (self.learning_rate, self.beta1, self.beta2, self.eps,
                           self.grad_clip, self.smoothing)
        if not all(np.isfinite(v) and v > 0 for v in finite_positive):
            raise ConfigError("hyperparameters must be finite and positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        self.weights.validate()
        self.anneal.validate()
        return self


@dataclass
class TrainReport:
    model: str
    epochs: list = field(default_factory=list)  # dicts: epoch, b, train/val terms
    wall_seconds: float = 0.0
    checkpoint_path: str = ""


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in params.items() if p.requires_grad}

    def step(self, params):
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, (m, v) in self.moments.items():
            p = params[name]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.learning_rate * (m / bias1)
                       / (np.sqrt(v / bias2) + self.eps)).astype(p.data.dtype)

    def state(self):
        return (self.step_count,
                {name: (m.copy(), v.copy()) for name, (m, v) in self.moments.items()})

    def load_state(self, state):
        step, moments = state
        self.step_count = step
        for name in self.moments:
            m, v = moments[name]
            self.moments[name] = (m.astype(np.float32).copy(),
                                  v.astype(np.float32).copy())


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most `max_norm`."""
    squared = 0.0
    for p in params.values():
        if p.requires_grad:
            squared += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(squared))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.requires_grad:
                p.grad *= scale
    return norm


def init_params(arch, kind, seed):
    """Deterministic parameter initialization (delegates to the model zoo)."""
    return nets.init_params(arch, kind, seed)


def effective_weights(cfg):
    """Zero out the loss branches a model kind does not train."""
    w = cfg.weights
    if cfg.model == "net1":
        return replace(w, cars=0.0, lanes=0.0, visual_next=0.0, cars_next=0.0,
                       lanes_next=0.0, visual_pred=0.0, cars_pred=0.0,
                       lanes_pred=0.0)
    if cfg.model == "net2":
        return replace(w, visual_next=0.0, cars_next=0.0, lanes_next=0.0,
                       visual_pred=0.0, cars_pred=0.0, lanes_pred=0.0)
    return w


def concept_config(dataset, train_indices, smoothing):
    """Class pixel ratios of the training split (imbalance weights)."""
    cars = [dataset.sequences[i].car for i in train_indices]
    lanes = [dataset.sequences[i].lane for i in train_indices]
    p_cars = scenes.class_pixel_ratio(cars, smoothing)
    p_lanes = scenes.class_pixel_ratio(lanes, smoothing)
    # An all-empty class would zero the weighting; fall back to the midpoint.
    return losses.ConceptLossConfig(
        p_cars=p_cars if p_cars > 0 else 0.5,
        p_lanes=p_lanes if p_lanes > 0 else 0.5,
        smoothing=smoothing).validate()


def _frame_batch(dataset, windows, offset=0):
    seqs = dataset.sequences
    rgb = np.stack([seqs[i].rgb[s + offset] for i, s in windows])
    car = np.stack([seqs[i].car[s + offset] for i, s in windows])
    lane = np.stack([seqs[i].lane[s + offset] for i, s in windows])
    return rgb, car, lane


def _build_batch(dataset, windows, model):
    batch = {}
    steps = 3 if model == "net3" else 1
    for t in range(steps):
        suffix = "" if t == 0 else str(t)
        rgb, car, lane = _frame_batch(dataset, windows, offset=t)
        batch["rgb" + suffix] = rgb
        batch["car" + suffix] = car
        batch["lane" + suffix] = lane
    return batch


def _compute_loss(model, batch, params, arch, cfg, weights, concept_cfg, b,
                  rng=None, sample=True):
    if model == "net3":
        return losses.loss_net3(batch, params, arch, cfg.anneal, weights,
                                concept_cfg, b, rng=rng, sample=sample)
    return losses.loss_net2(batch, params, arch, cfg.anneal, weights,
                            concept_cfg, b, rng=rng, sample=sample)


def _evaluate_split(model, dataset, windows, params, arch, cfg, weights,
                    concept_cfg, b):
    """Mean per-frame loss terms on a window list, deterministic (no sampling)."""
    if not windows:
        return {}
    sums = {}
    frames = 0
    for start in range(0, len(windows), cfg.batch_size):
        chunk = windows[start:start + cfg.batch_size]
        batch = _build_batch(dataset, chunk, model)
        total, breakdown = _compute_loss(model, batch, params, arch, cfg,
                                         weights, concept_cfg, b, sample=False)
        for key, value in breakdown.items():
            sums[key] = sums.get(key, 0.0) + value
        sums["total"] = sums.get("total", 0.0) + total.item()
        frames += len(chunk)
    return {k: v / frames for k, v in sums.items()}


class _CsvLog:
    def __init__(self, path, model):
        self.path = path
        self.columns = ("epoch", "b", "split") + TERM_COLUMNS[model] + ("total",)
        self.rows = []

    def add(self, epoch, b, split, terms):
        row = [epoch, b, split]
        row += [f"{terms.get(c, 0.0):.8g}" for c in self.columns[3:]]
        self.rows.append(row)

    def write(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            writer.writerows(self.rows)


def train(cfg, arch, dataset, out_path, log_path=None, resume_from=None,
          progress=None):
    """Train net1/net2/net3 on a scene dataset; returns a TrainReport.

    Checkpoints land at `out_path` every `checkpoint_every` epochs and at
    the end; `log_path` receives a CSV with one row per epoch and split.
    """
    cfg.validate()
    if cfg.model == "net4":
        raise UsageError("net4 trains on latent files; use train_predictor")
    if dataset.resolution != arch.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} does not"
                          f" match architecture {arch.resolution}")
    progress = progress if progress is not None else _stderr_progress
    started = time.monotonic()

    lengths = [len(s) for s in dataset.sequences]
    train_idx, val_idx, _ = dataio.split(len(dataset), cfg.fractions, cfg.seed)
    window = 3 if cfg.model == "net3" else 1
    val_windows = dataio.windows_for(lengths, val_idx, window, 1)
    weights = effective_weights(cfg)
    concept_cfg = concept_config(dataset, train_idx, cfg.smoothing)
    digest = dataio.config_digest(arch.describe())

    params = nets.as_tensors(init_params(arch, cfg.model, cfg.seed))
    adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    b = 0
    first_epoch = 0
    if resume_from is not None:
        state = dataio.load_checkpoint(resume_from, expected_digest=digest)
        if state["kind"] != cfg.model:
            raise ConfigError(f"checkpoint holds {state['kind']}, expected {cfg.model}")
        params = nets.as_tensors(state["params"])
        adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        if state["opt_state"] is not None:
            adam.load_state(state["opt_state"])
        b = state["batch_counter"]
        first_epoch = state["epoch"]

    log = _CsvLog(log_path, cfg.model)
    report = TrainReport(model=cfg.model)

    def save(epoch):
        dataio.save_checkpoint(out_path, cfg.model, digest,
                               nets.as_arrays(params), epoch, b, adam.state())

    for epoch in range(first_epoch, cfg.epochs):
        epoch_windows = dataio.batch_windows(lengths, train_idx, window, 1,
                                             cfg.seed, epoch)
        train_sums = {}
        train_frames = 0
        for step_index, start in enumerate(range(0, len(epoch_windows),
                                                 cfg.batch_size)):
            chunk = epoch_windows[start:start + cfg.batch_size]
            batch = _build_batch(dataset, chunk, cfg.model)
            noise_rng = stream_rng(cfg.seed, 1, epoch, step_index)
            total, breakdown = _compute_loss(cfg.model, batch, params, arch,
                                             cfg, weights, concept_cfg, b,
                                             rng=noise_rng)
            value = total.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {step_index}",
                    batch_index=step_index, breakdown=breakdown)
            T.backward(total)
            clip_gradients(params, cfg.grad_clip)
            adam.step(params)
            for p in params.values():
                p.zero_grad()
            for key, term_value in breakdown.items():
                train_sums[key] = train_sums.get(key, 0.0) + term_value
            train_sums["total"] = train_sums.get("total", 0.0) + value
            train_frames += len(chunk)
            b += 1

        train_terms = {k: v / train_frames for k, v in train_sums.items()}
        with T.no_grad():
            val_terms = _evaluate_split(cfg.model, dataset, val_windows, params,
                                        arch, cfg, weights, concept_cfg, b)
        log.add(epoch + 1, b, "train", train_terms)
        if val_terms:
            log.add(epoch + 1, b, "val", val_terms)
        report.epochs.append({"epoch": epoch + 1, "b": b,
                              "train": train_terms, "val": val_terms})
        progress(f"[{cfg.model}] epoch {epoch + 1}/{cfg.epochs}"
                 f" train {train_terms['total']:.4f}"
                 + (f" val {val_terms['total']:.4f}" if val_terms else ""))
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
            save(epoch + 1)

    save(cfg.epochs)
    log.write()
    report.wall_seconds = time.monotonic() - started
    report.checkpoint_path = str(out_path)
    return report


def _stderr_progress(message):
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Latent export and the sequence predictor
# ---------------------------------------------------------------------------

def encode_sequence_means(params, arch, rgb, chunk=64):
    """Latent means for every frame of one sequence array (L,3,R,R)."""
    outputs = []
    with T.no_grad():
        for start in range(0, rgb.shape[0], chunk):
            x = T.Tensor(rgb[start:start + chunk].astype(np.float32, copy=False))
            mu, _ = nets.encode(params, arch, x)
            outputs.append(mu.data)
    return np.concatenate(outputs, axis=0)


def export_latents(checkpoint_path, arch, dataset, out_path):
    """Write per-frame latent means of every sequence to a latent file."""
    digest = dataio.config_digest(arch.describe())
    state = dataio.load_checkpoint(checkpoint_path, expected_digest=digest)
    if state["kind"] not in ("net1", "net2", "net3"):
        raise ConfigError(f"latent export needs an autoencoder checkpoint,"
                          f" got {state['kind']}")
    if dataset.resolution != arch.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} does not"
                          f" match checkpoint architecture {arch.resolution}")
    params = nets.as_tensors(state["params"], trainable=False)
    trajectories = [encode_sequence_means(params, arch, seq.rgb)
                    for seq in dataset.sequences]
    layout = arch.layout
    dataio.save_latents(out_path, layout.n_total, layout.n_cars, layout.n_lanes,
                        trajectories)
    return trajectories


def _latent_windows(trajectories, indices, window):
    lengths = [t.shape[0] for t in trajectories]
    return dataio.windows_for(lengths, indices, window, 1)


def train_predictor(cfg, arch, latents_path, out_path, log_path=None,
                    progress=None):
    """Train the stacked+parallel GRU predictor on exported latents."""
    cfg.validate()
    if cfg.model != "net4":
        raise UsageError(f"train_predictor trains net4, got {cfg.model}")
    progress = progress if progress is not None else _stderr_progress
    started = time.monotonic()

    (n_total, n_cars, n_lanes), trajectories = dataio.load_latents(latents_path)
    layout = arch.layout
    if (n_total, n_cars, n_lanes) != (layout.n_total, layout.n_cars, layout.n_lanes):
        raise ConfigError(f"latent layout {(n_total, n_cars, n_lanes)} does not"
                          f" match architecture"
                          f" {(layout.n_total, layout.n_cars, layout.n_lanes)}")
    window = arch.predictor_inputs + arch.predictor_outputs
    train_idx, val_idx, _ = dataio.split(len(trajectories), cfg.fractions, cfg.seed)
    val_windows = _latent_windows(trajectories, val_idx, window)

    stacked = np.concatenate([trajectories[i] for i in train_idx], axis=0)
    params = nets.as_tensors(init_params(arch, "net4", cfg.seed))
    nets.set_predictor_normalization(params, stacked.mean(axis=0),
                                     stacked.std(axis=0))
    adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    digest = dataio.config_digest(arch.describe())
    log = _CsvLog(log_path, "net4")
    report = TrainReport(model="net4")
    b = 0
    lengths = [t.shape[0] for t in trajectories]

    def batch_loss(chunk):
        block = np.stack([trajectories[i][s:s + window] for i, s in chunk])
        inputs = [T.Tensor(block[:, t]) for t in range(arch.predictor_inputs)]
        targets = [block[:, arch.predictor_inputs + t]
                   for t in range(arch.predictor_outputs)]
        predicted = nets.sequence_predict(params, arch, inputs)
        return losses.loss_net4(predicted, targets)

    for epoch in range(cfg.epochs):
        windows = dataio.batch_windows(lengths, train_idx, window, 1,
                                       cfg.seed, epoch)
        train_sum = 0.0
        batches = 0
        for step_index, start in enumerate(range(0, len(windows), cfg.batch_size)):
            chunk = windows[start:start + cfg.batch_size]
            total = batch_loss(chunk)
            value = total.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} batch"
                                   f" {step_index}", batch_index=step_index,
                                   breakdown={"mse": value})
            T.backward(total)
            clip_gradients(params, cfg.grad_clip)
            adam.step(params)
            for p in params.values():
                p.zero_grad()
            train_sum += value
            batches += 1
            b += 1
        train_terms = {"mse": train_sum / batches, "total": train_sum / batches}
        val_terms = {}
        if val_windows:
            with T.no_grad():
                val_values = []
                for start in range(0, len(val_windows), cfg.batch_size):
                    val_values.append(batch_loss(
                        val_windows[start:start + cfg.batch_size]).item())
            val_terms = {"mse": float(np.mean(val_values)),
                         "total": float(np.mean(val_values))}
        log.add(epoch + 1, b, "train", train_terms)
        if val_terms:
            log.add(epoch + 1, b, "val", val_terms)
        report.epochs.append({"epoch": epoch + 1, "b": b,
                              "train": train_terms, "val": val_terms})
        progress(f"[net4] epoch {epoch + 1}/{cfg.epochs}"
                 f" train {train_terms['mse']:.6f}"
                 + (f" val {val_terms['mse']:.6f}" if val_terms else ""))
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
            dataio.save_checkpoint(out_path, "net4", digest,
                                   nets.as_arrays(params), epoch + 1, b,
                                   adam.state())
    log.write()
    report.wall_seconds = time.monotonic() - started
    report.checkpoint_path = str(out_path)
    return report
