"""Training objectives: annealed KL, Gaussian reconstruction likelihood,
imbalance-weighted concept cross-entropy, and the composite losses.

Composite losses return a scalar tensor plus a per-term breakdown for
logging. Terms sum over the batch; the trainer divides by the frame count
only when reporting. When a term's weight is zero, its branch is skipped
entirely, so degenerate configurations reduce exactly to the smaller loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError

_CLAMP = 1e-7


@dataclass(frozen=True)
class AnnealSchedule:
    """KL weight ramp 1 - (1 - k0) * kappa**b over batch iterations b."""
    k0: float = 0.01
    kappa: float = 0.995

    def validate(self):
        if not 0.0 < self.k0 <= 1.0:
            raise ConfigError(f"k0 must be in (0, 1], got {self.k0}")
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError(f"kappa must be in (0, 1), got {self.kappa}")
        return self


def anneal_weight(schedule, b):
    """KL weight after `b` batch iterations; starts at k0, approaches 1."""
    if b < 0:
        raise UsageError(f"batch counter must be >= 0, got {b}")
    return 1.0 - (1.0 - schedule.k0) * schedule.kappa ** b


@dataclass(frozen=True)
class LossWeights:
    """Term weights; the *_next group applies to the successor frame's own
    reconstruction, the *_pred group to reconstructions from the predicted
    latent."""
    visual: float = 1.0
    cars: float = 10.0
    lanes: float = 10.0
    visual_next: float = 1.0
    cars_next: float = 10.0
    lanes_next: float = 10.0
    visual_pred: float = 1.0
    cars_pred: float = 10.0
    lanes_pred: float = 10.0

    def validate(self):
        values = [self.visual, self.cars, self.lanes, self.visual_next,
                  self.cars_next, self.lanes_next, self.visual_pred,
                  self.cars_pred, self.lanes_pred]
        if any(v < 0 for v in values):
            raise ConfigError(f"loss weights must be nonnegative: {self}")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive")
        return self


@dataclass(frozen=True)
class ConceptLossConfig:
    """Class pixel ratios feeding the imbalance weighting."""
    p_cars: float
    p_lanes: float
    smoothing: float = 4.0

    def validate(self):
        for name, p in (("p_cars", self.p_cars), ("p_lanes", self.p_lanes)):
            if not 0.0 < p <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {p}")
        if self.smoothing <= 0:
            raise ConfigError(f"smoothing must be > 0, got {self.smoothing}")
        return self


def kl_gaussian(mu, log_var):
    """Closed-form KL from N(mu, exp(log_var)) to the standard normal."""
    if mu.shape != log_var.shape:
        raise ShapeError(f"kl_gaussian: shapes {mu.shape} and {log_var.shape}"
                         " do not match")
    inner = 1.0 + log_var - mu * mu - T.exp(log_var)
    return T.total(inner) * -0.5


def recon_nll_visual(reconstruction, target):
    """Unit-variance Gaussian negative log-likelihood, constants dropped."""
    target_data = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if reconstruction.shape != target_data.shape:
        raise ShapeError(f"reconstruction {reconstruction.shape} and target"
                         f" {target_data.shape} do not match")
    diff = reconstruction - T.Tensor(target_data.astype(reconstruction.dtype, copy=False))
    return T.total(diff * diff) * 0.5


def weighted_concept_nll(prob_map, target_mask, class_ratio):
    """Cross-entropy with true/false pixels reweighted by the class ratio.

    True pixels carry weight (1 - P), false pixels weight P, and each
    image is normalized by its total pixel weight, so rare positives are
    upweighted. Accepts a single map or a batch; batches sum the
    per-image values.
    """
    if not 0.0 < class_ratio <= 1.0:
        raise ConfigError(f"class ratio must be in (0, 1], got {class_ratio}")
    mask = np.asarray(target_mask.data if isinstance(target_mask, T.Tensor)
                      else target_mask)
    if mask.shape != prob_map.shape:
        try:
            mask = mask.reshape(prob_map.shape)
        except ValueError:
            raise ShapeError(f"mask {mask.shape} does not match probability map"
                             f" {prob_map.shape}") from None
    if not np.isin(mask, (0, 1)).all():
        raise UsageError("target mask must be exactly 0/1 valued")
    dtype = prob_map.dtype
    y = mask.astype(dtype)
    p = float(class_ratio)
    if y.ndim <= 2:
        # single map: normalize over all pixels
        n_true = float(y.sum())
        n_false = y.size - n_true
        inv = np.asarray(1.0 / ((1.0 - p) * n_true + p * n_false), dtype=dtype)
    else:
        # batched maps: normalize each image by its own pixel weight
        per_image = int(np.prod(y.shape[1:]))
        n_true = y.sum(axis=tuple(range(1, y.ndim)), dtype=np.float64)
        denom = (1.0 - p) * n_true + p * (per_image - n_true)
        inv = (1.0 / denom).astype(dtype).reshape((y.shape[0],) + (1,) * (y.ndim - 1))

    probs = T.clip(prob_map, _CLAMP, 1.0 - _CLAMP)
    true_term = T.mul_const(T.log(probs), (1.0 - p) * y)
    false_term = T.mul_const(T.log(1.0 - probs), p * (1.0 - y))
    weighted = T.mul_const(true_term + false_term, inv)
    return T.total(weighted) * -1.0


def _batch_tensors(batch, keys, dtype):
    missing = [k for k in keys if k not in batch or batch[k] is None]
    if missing:
        raise UsageError(f"batch is missing {missing}")
    out = {}
    for k in keys:
        arr = np.asarray(batch[k])
        if k.startswith("rgb"):
            out[k] = arr.astype(dtype, copy=False)
        else:
            out[k] = arr.astype(dtype)
            if out[k].ndim == 3:
                out[k] = out[k][:, None]
    return out


def _param_dtype(params):
    return next(iter(params.values())).dtype


def loss_net2(batch, params, arch, schedule, weights, concept_cfg, b,
              rng=None, sample=True):
    """Composite concept-autoencoder loss on one frame batch.

    Returns (total, breakdown) with terms E_K, E_V, E_C, E_L. Concept
    terms are skipped exactly when their weight is zero, which reduces the
    loss to the plain annealed variational objective.
    """
    total, breakdown, _ = _loss_net2_with_latent(
        batch, params, arch, schedule, weights, concept_cfg, b,
        rng=rng, sample=sample)
    return total, breakdown


def _loss_net2_with_latent(batch, params, arch, schedule, weights, concept_cfg,
                           b, rng=None, sample=True):
    dtype = _param_dtype(params)
    data = _batch_tensors(batch, ("rgb", "car", "lane"), dtype)
    x = T.Tensor(data["rgb"])
    mu, log_var = nets.encode(params, arch, x)
    if sample:
        if rng is None:
            raise UsageError("sampling requires a random generator")
        noise = rng.standard_normal(mu.shape).astype(dtype)
        z = T.reparameterize(mu, log_var, noise)
    else:
        z = mu

    terms = {}
    total = kl_gaussian(mu, log_var) * float(anneal_weight(schedule, b))
    terms["E_K"] = total
    if weights.visual > 0:
        term = recon_nll_visual(nets.decode_visual(params, arch, z), data["rgb"])
        terms["E_V"] = term * weights.visual
        total = total + terms["E_V"]
    if weights.cars > 0:
        seg = nets.project_latent(arch.layout, z, "cars")
        term = weighted_concept_nll(nets.decode_concept(params, arch, seg, "cars"),
                                    data["car"], concept_cfg.p_cars)
        terms["E_C"] = term * weights.cars
        total = total + terms["E_C"]
    if weights.lanes > 0:
        seg = nets.project_latent(arch.layout, z, "lanes")
        term = weighted_concept_nll(nets.decode_concept(params, arch, seg, "lanes"),
                                    data["lane"], concept_cfg.p_lanes)
        terms["E_L"] = term * weights.lanes
        total = total + terms["E_L"]
    breakdown = {k: v.item() for k, v in terms.items()}
    return total, breakdown, z


def loss_net3(batch, params, arch, schedule, weights, concept_cfg, b,
              rng=None, sample=True):
    """Temporal-autoencoder loss over a (frame, next, next-next) triple.

    The batch carries rgb/car/lane for suffixes "", "1" and "2". On top of
    the base terms, the *_next weights reconstruct the successor frame
    from its own encoding, and the *_pred weights reconstruct the second
    successor from the latent predicted by the recurrence.
    """
    total, breakdown, z = _loss_net2_with_latent(batch, params, arch, schedule,
                                                 weights, concept_cfg, b,
                                                 rng=rng, sample=sample)
    dtype = _param_dtype(params)

    want_next = (weights.visual_next > 0 or weights.cars_next > 0
                 or weights.lanes_next > 0)
    want_pred = (weights.visual_pred > 0 or weights.cars_pred > 0
                 or weights.lanes_pred > 0)
    if not (want_next or want_pred):
        return total, breakdown

    data1 = _batch_tensors(batch, ("rgb1", "car1", "lane1"), dtype)
    mu1, log_var1 = nets.encode(params, arch, T.Tensor(data1["rgb1"]))

    if want_next:
        if sample:
            noise = rng.standard_normal(mu1.shape).astype(dtype)
            z1 = T.reparameterize(mu1, log_var1, noise)
        else:
            z1 = mu1
        for weight, key, concept, rgb_key, mask_key, ratio in (
                (weights.visual_next, "Ep_V", None, "rgb1", None, None),
                (weights.cars_next, "Ep_C", "cars", None, "car1", concept_cfg.p_cars),
                (weights.lanes_next, "Ep_L", "lanes", None, "lane1", concept_cfg.p_lanes)):
            if weight <= 0:
                continue
            if concept is None:
                term = recon_nll_visual(nets.decode_visual(params, arch, z1),
                                        data1[rgb_key])
            else:
                seg = nets.project_latent(arch.layout, z1, concept)
                term = weighted_concept_nll(
                    nets.decode_concept(params, arch, seg, concept),
                    data1[mask_key], ratio)
            term = term * weight
            breakdown[key] = term.item()
            total = total + term

    if want_pred:
        data2 = _batch_tensors(batch, ("rgb2", "car2", "lane2"), dtype)
        z2_hat = nets.latent_rnn_step(params, z, mu1)
        for weight, key, concept, rgb_key, mask_key, ratio in (
                (weights.visual_pred, "Epp_V", None, "rgb2", None, None),
                (weights.cars_pred, "Epp_C", "cars", None, "car2", concept_cfg.p_cars),
                (weights.lanes_pred, "Epp_L", "lanes", None, "lane2", concept_cfg.p_lanes)):
            if weight <= 0:
                continue
            if concept is None:
                term = recon_nll_visual(nets.decode_visual(params, arch, z2_hat),
                                        data2[rgb_key])
            else:
                seg = nets.project_latent(arch.layout, z2_hat, concept)
                term = weighted_concept_nll(
                    nets.decode_concept(params, arch, seg, concept),
                    data2[mask_key], ratio)
            term = term * weight
            breakdown[key] = term.item()
            total = total + term

    return total, breakdown


def loss_net4(predicted, target):
    """Mean squared error between predicted and target latent groups."""
    if len(predicted) != len(target):
        raise UsageError(f"{len(predicted)} predictions vs {len(target)} targets")
    if not predicted:
        raise UsageError("empty prediction list")
    count = 0
    total = None
    for pred, tgt in zip(predicted, target):
        tgt_data = tgt.data if isinstance(tgt, T.Tensor) else np.asarray(tgt)
        if pred.shape != tgt_data.shape:
            raise ShapeError(f"prediction {pred.shape} and target"
                             f" {tgt_data.shape} do not match")
        diff = pred - T.Tensor(tgt_data.astype(pred.dtype, copy=False))
        sq = T.total(diff * diff)
        total = sq if total is None else total + sq
        count += tgt_data.size
    return total * (1.0 / count)
