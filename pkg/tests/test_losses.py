import numpy as np
import pytest

from latentscene import losses, nets
from latentscene import tensor as T
from latentscene.errors import ConfigError, ShapeError, UsageError

from conftest import finite_difference_check, random_batch, tiny_params


def scalar(value):
    return T.Tensor(np.asarray(value, dtype=np.float64))


class TestKlGaussian:
    def test_prior_equals_posterior(self):
        assert losses.kl_gaussian(scalar(np.zeros(4)), scalar(np.zeros(4))).item() == 0.0

    def test_unit_mean_shift(self):
        value = losses.kl_gaussian(scalar([1.0]), scalar([0.0])).item()
        assert abs(value - 0.5) < 1e-12

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            mu = rng.uniform(-1.5, 1.5, 6)
            log_var = rng.uniform(-1.2, 1.2, 6)
            analytic = losses.kl_gaussian(scalar(mu), scalar(log_var)).item()
            std = np.exp(0.5 * log_var)
            z = mu + std * rng.standard_normal((100_000, 6))
            log_q = (-0.5 * (((z - mu) / std) ** 2).sum(axis=1)
                     - np.log(std).sum())
            log_p = -0.5 * (z ** 2).sum(axis=1)
            estimate = float(np.mean(log_q - log_p))
            assert abs(estimate - analytic) / analytic < 0.01

    def test_nonnegative_on_random_draws(self):
        rng = np.random.default_rng(11)
        mu = rng.standard_normal((10_000, 3))
        log_var = rng.standard_normal((10_000, 3))
        values = -0.5 * (1.0 + log_var - mu ** 2 - np.exp(log_var)).sum(axis=1)
        assert values.min() >= 0.0
        sampled = losses.kl_gaussian(scalar(mu), scalar(log_var)).item()
        assert abs(sampled - values.sum()) / values.sum() < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses.kl_gaussian(scalar(np.zeros(3)), scalar(np.zeros(4)))


class TestAnnealWeight:
    def test_starts_at_k0(self):
        schedule = losses.AnnealSchedule(k0=0.01, kappa=0.999).validate()
        assert abs(losses.anneal_weight(schedule, 0) - 0.01) < 1e-12

    def test_limit_is_one(self):
        schedule = losses.AnnealSchedule(k0=0.01, kappa=0.999)
        assert abs(losses.anneal_weight(schedule, 10_000_000) - 1.0) < 1e-9

    def test_closed_form_value(self):
        schedule = losses.AnnealSchedule(k0=0.01, kappa=0.999)
        value = losses.anneal_weight(schedule, 1000)
        assert abs(value - (1.0 - 0.99 * 0.999 ** 1000)) < 1e-12
        assert abs(value - 0.6359) < 2e-4

    def test_monotone_and_bounded(self):
        schedule = losses.AnnealSchedule(k0=0.05, kappa=0.99)
        values = [losses.anneal_weight(schedule, b) for b in range(0, 2000, 7)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(0.05 <= v < 1.0 for v in values)

    def test_negative_counter_rejected(self):
        with pytest.raises(UsageError):
            losses.anneal_weight(losses.AnnealSchedule(), -1)

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            losses.AnnealSchedule(k0=0.0).validate()
        with pytest.raises(ConfigError):
            losses.AnnealSchedule(kappa=1.0).validate()


class TestReconNll:
    def test_perfect_reconstruction(self, rng):
        x = rng.random((2, 3, 4, 4))
        assert losses.recon_nll_visual(scalar(x), x).item() == 0.0

    def test_single_pixel_off_by_one(self):
        recon = np.zeros((2, 2))
        target = np.zeros((2, 2))
        target[0, 0] = 1.0
        assert losses.recon_nll_visual(scalar(recon), target).item() == 0.5

    def test_matches_half_sum_of_squares(self, rng):
        a = rng.random((3, 3, 8, 8))
        b = rng.random((3, 3, 8, 8))
        value = losses.recon_nll_visual(scalar(a), b).item()
        assert abs(value - 0.5 * ((a - b) ** 2).sum()) < 1e-9

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            losses.recon_nll_visual(scalar(rng.random((2, 2))), rng.random((3, 2)))


class TestWeightedConceptNll:
    def test_perfect_prediction_below_clamp_floor(self):
        mask = (np.arange(64).reshape(8, 8) < 8).astype(np.float64)
        value = losses.weighted_concept_nll(scalar(mask), mask, 0.7).item()
        assert 0.0 < value <= 1.6e-6

    def test_symmetric_case_reduces_to_mean_bce(self, rng):
        mask = (rng.random((8, 8)) < 0.3).astype(np.float64)
        probs = rng.uniform(0.05, 0.95, (8, 8))
        value = losses.weighted_concept_nll(scalar(probs), mask, 0.5).item()
        bce = -np.mean(mask * np.log(probs) + (1 - mask) * np.log(1 - probs))
        assert abs(value - bce) < 1e-9

    def test_all_background_uniform_prediction(self):
        probs = np.full((16, 16), 0.5)
        value = losses.weighted_concept_nll(scalar(probs), np.zeros((16, 16)),
                                            0.8409).item()
        assert abs(value - np.log(2.0)) < 1e-9

    def test_batch_sums_per_image_values(self, rng):
        probs = rng.uniform(0.1, 0.9, (3, 1, 6, 6))
        masks = (rng.random((3, 1, 6, 6)) < 0.2).astype(np.float64)
        batch_value = losses.weighted_concept_nll(scalar(probs), masks, 0.6).item()
        single = sum(losses.weighted_concept_nll(scalar(probs[i]), masks[i],
                                                 0.6).item()
                     for i in range(3))
        assert abs(batch_value - single) < 1e-9

    def test_class_ratio_validated(self, rng):
        probs = scalar(rng.uniform(0.2, 0.8, (4, 4)))
        for bad in (0.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                losses.weighted_concept_nll(probs, np.zeros((4, 4)), bad)

    def test_non_binary_mask_rejected(self, rng):
        with pytest.raises(UsageError):
            losses.weighted_concept_nll(scalar(rng.uniform(0.2, 0.8, (4, 4))),
                                        np.full((4, 4), 0.5), 0.5)


class TestCompositeNet2:
    def setup_method(self):
        self.arch, self.params = tiny_params("net2")
        self.schedule = losses.AnnealSchedule(0.2, 0.9)
        self.concept = losses.ConceptLossConfig(0.55, 0.45)

    def test_degenerates_to_plain_vae_loss(self, rng):
        batch = random_batch(rng, self.arch)
        weights = losses.LossWeights(1.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0)
        total, breakdown = losses.loss_net2(
            batch, self.params, self.arch, self.schedule, weights,
            self.concept, b=10_000_000, rng=np.random.default_rng(5))
        x = T.Tensor(batch["rgb"].astype(np.float64))
        mu, log_var = nets.encode(self.params, self.arch, x)
        noise = np.random.default_rng(5).standard_normal(mu.shape)
        z = T.reparameterize(mu, log_var, noise)
        plain = (losses.kl_gaussian(mu, log_var).item()
                 + losses.recon_nll_visual(
                     nets.decode_visual(self.params, self.arch, z),
                     batch["rgb"].astype(np.float64)).item())
        assert abs(total.item() - plain) < 1e-9 * max(1.0, abs(plain))
        assert set(breakdown) == {"E_K", "E_V"}

    def test_all_terms_nonnegative(self, rng):
        batch = random_batch(rng, self.arch)
        total, breakdown = losses.loss_net2(
            batch, self.params, self.arch, self.schedule,
            losses.LossWeights(1, 5, 5), self.concept, b=3,
            rng=np.random.default_rng(0))
        assert set(breakdown) == {"E_K", "E_V", "E_C", "E_L"}
        assert all(v >= 0.0 for v in breakdown.values())
        assert total.item() >= 0.0

    def test_total_equals_sum_of_terms(self, rng):
        batch = random_batch(rng, self.arch)
        total, breakdown = losses.loss_net2(
            batch, self.params, self.arch, self.schedule,
            losses.LossWeights(1, 5, 5), self.concept, b=3,
            rng=np.random.default_rng(0))
        assert abs(total.item() - sum(breakdown.values())) < 1e-9

    def test_pure_function_of_inputs(self, rng):
        batch = random_batch(rng, self.arch)
        args = (batch, self.params, self.arch, self.schedule,
                losses.LossWeights(1, 5, 5), self.concept, 3)
        a = losses.loss_net2(*args, rng=np.random.default_rng(9))[0].item()
        b = losses.loss_net2(*args, rng=np.random.default_rng(9))[0].item()
        assert a == b

    def test_missing_masks_rejected(self, rng):
        batch = random_batch(rng, self.arch)
        del batch["car"]
        with pytest.raises(UsageError):
            losses.loss_net2(batch, self.params, self.arch, self.schedule,
                             losses.LossWeights(1, 5, 5), self.concept, 0,
                             rng=np.random.default_rng(0))


class TestCompositeNet3:
    def setup_method(self):
        self.arch, self.params = tiny_params("net3")
        self.schedule = losses.AnnealSchedule(0.2, 0.9)
        self.concept = losses.ConceptLossConfig(0.55, 0.45)

    def test_zero_temporal_weights_equal_net2_exactly(self, rng):
        batch = random_batch(rng, self.arch, steps=3)
        weights = losses.LossWeights(1, 5, 5, 0, 0, 0, 0, 0, 0)
        a = losses.loss_net3(batch, self.params, self.arch, self.schedule,
                             weights, self.concept, 4,
                             rng=np.random.default_rng(2))[0].item()
        b = losses.loss_net2(batch, self.params, self.arch, self.schedule,
                             weights, self.concept, 4,
                             rng=np.random.default_rng(2))[0].item()
        assert a == b

    def test_reports_ten_terms(self, rng):
        batch = random_batch(rng, self.arch, steps=3)
        weights = losses.LossWeights(1, 5, 5, 1, 5, 5, 1, 5, 5)
        _, breakdown = losses.loss_net3(batch, self.params, self.arch,
                                        self.schedule, weights, self.concept,
                                        4, rng=np.random.default_rng(2))
        assert set(breakdown) == {"E_K", "E_V", "E_C", "E_L", "Ep_V", "Ep_C",
                                  "Ep_L", "Epp_V", "Epp_C", "Epp_L"}

    def test_prediction_terms_reach_recurrence_parameters(self, rng):
        batch = random_batch(rng, self.arch, steps=3)
        weights = losses.LossWeights(1, 5, 5, 1, 5, 5, 1, 5, 5)
        total, _ = losses.loss_net3(batch, self.params, self.arch,
                                    self.schedule, weights, self.concept, 4,
                                    rng=np.random.default_rng(2))
        T.backward(total)
        assert np.any(self.params["rnn.wx"].grad != 0)
        assert np.any(self.params["rnn.wo"].grad != 0)

    def test_successor_terms_do_not_touch_recurrence(self, rng):
        batch = random_batch(rng, self.arch, steps=3)
        weights = losses.LossWeights(1, 5, 5, 1, 5, 5, 0, 0, 0)
        total, breakdown = losses.loss_net3(batch, self.params, self.arch,
                                            self.schedule, weights,
                                            self.concept, 4,
                                            rng=np.random.default_rng(2))
        T.backward(total)
        assert np.all(self.params["rnn.wx"].grad == 0)
        assert np.all(self.params["rnn.wo"].grad == 0)
        assert "Epp_V" not in breakdown and "Ep_V" in breakdown


class TestNet4Loss:
    def test_zero_for_exact_prediction(self, rng):
        pred = [T.Tensor(rng.normal(size=(1, 8))) for _ in range(4)]
        assert losses.loss_net4(pred, [p.data for p in pred]).item() == 0.0

    def test_single_coordinate_error(self):
        width = 8
        predicted = [T.Tensor(np.zeros((1, width))) for _ in range(4)]
        target = [np.zeros((1, width)) for _ in range(4)]
        target[2][0, 3] = 2.0
        value = losses.loss_net4(predicted, target).item()
        assert abs(value - 4.0 / (4 * width)) < 1e-12

    def test_matches_brute_force_mean_square(self, rng):
        predicted = [T.Tensor(rng.normal(size=(3, 5))) for _ in range(4)]
        target = [rng.normal(size=(3, 5)) for _ in range(4)]
        value = losses.loss_net4(predicted, target).item()
        brute = np.mean([(p.data - t) ** 2 for p, t in zip(predicted, target)])
        assert abs(value - brute) < 1e-12

    def test_count_mismatch_rejected(self, rng):
        predicted = [T.Tensor(rng.normal(size=(1, 4)))]
        with pytest.raises(UsageError):
            losses.loss_net4(predicted, [rng.normal(size=(1, 4))] * 2)


class TestLossGradients:
    def test_net3_loss_full_finite_difference(self, rng):
        arch, params = tiny_params("net3")
        batch = random_batch(rng, arch, batch=1, steps=3)
        weights = losses.LossWeights(1, 3, 3, 1, 3, 3, 1, 3, 3)
        schedule = losses.AnnealSchedule(0.3, 0.9)
        concept = losses.ConceptLossConfig(0.6, 0.4)

        def build():
            return losses.loss_net3(batch, params, arch, schedule, weights,
                                    concept, 2, sample=False)[0]

        tracked = [p for p in params.values() if p.requires_grad]
        worst = finite_difference_check(build, tracked, rng, samples=2)
        assert worst < 1e-4

    def test_net4_loss_finite_difference(self, rng):
        arch, params = tiny_params("net4")
        inputs = [T.Tensor(rng.normal(size=(2, arch.layout.n_total)))
                  for _ in range(arch.predictor_inputs)]
        targets = [rng.normal(size=(2, arch.layout.n_total))
                   for _ in range(arch.predictor_outputs)]

        def build():
            return losses.loss_net4(nets.sequence_predict(params, arch, inputs),
                                    targets)

        tracked = [p for p in params.values() if p.requires_grad]
        worst = finite_difference_check(build, tracked, rng, samples=2)
        assert worst < 1e-4
