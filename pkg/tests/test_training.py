import math

import numpy as np
import pytest

from manetpower import difftensor as dt
from manetpower import gnn
from manetpower.batch import GraphBatch
from manetpower.channel import CsiTensor, perturb_csi
from manetpower.rateops import surrogate_objective
from manetpower.training import (
    Adam,
    TrainingConfig,
    TrainingDiverged,
    _mono_term,
    clip_gradients,
    gradient_step,
    mono_loss,
    rate_loss,
    total_loss,
    train,
)

from conftest import assert_grad_close, central_difference, random_instance


def make_batch(samples):
    return GraphBatch.from_samples([s[0] for s in samples], [s[1] for s in samples])


@pytest.fixture
def small(rng):
    samples = [random_instance(rng, n=6, n_bands=2) for _ in range(4)]
    return gnn.init_params(2, 4, rng), samples


class TestLosses:
    def test_single_sample_is_negated_surrogate(self, small):
        params, samples = small
        t, csi = samples[0]
        batch = make_batch(samples[:1])
        P = gnn.allocate(params, t, csi)
        assert rate_loss(params, batch, tau=0.1).item() == pytest.approx(-surrogate_objective(P, csi, t, 0.1),
                                                                         rel=1e-12)

    def test_duplicates_do_not_change_mean(self, small):
        params, samples = small
        once = rate_loss(params, make_batch(samples[:1])).item()
        twice = rate_loss(params, make_batch(samples[:1] * 2)).item()
        assert twice == pytest.approx(once, rel=1e-13)

    def test_mono_examples(self):
        flat = [dt.Tensor([1.0]), dt.Tensor([1.0])]
        assert _mono_term(flat, 0.1).item() == pytest.approx(0.1)
        rising = [dt.Tensor([1.0, 2.0]), dt.Tensor([1.5, 2.5]), dt.Tensor([2.0, 3.0])]
        assert _mono_term(rising, 0.1).item() == 0.0
        assert _mono_term(flat[:1], 0.1).item() == 0.0

    def test_mono_zero_for_two_rounds(self, rng):
        t, csi = random_instance(rng)
        params = gnn.init_params(2, 2, rng)
        assert mono_loss(params, make_batch([(t, csi)])).item() == 0.0

    def test_breakdown_composition(self, small):
        params, samples = small
        batch = make_batch(samples)
        for lam in (0.0, 1.0, 0.3):
            cfg = TrainingConfig(lam=lam)
            br = total_loss(params, batch, None, cfg)
            r, m, tot = br.values
            assert r == pytest.approx(rate_loss(params, batch, tau=cfg.tau).item(), rel=1e-13)
            assert m == pytest.approx(mono_loss(params, batch, tau=cfg.tau, delta=cfg.delta).item(), rel=1e-13)
            assert tot == pytest.approx(r + lam * m, rel=1e-13)
            assert br.layer_rates.shape == (3,)

    def test_sign_bounds(self, rng):
        # smooth-min can dip below zero by at most tau * ln(hops) per band, so
        # with non-negative rates rate_loss <= B * tau * ln(n - 1)
        tau, B = 0.1, 2
        for _ in range(30):
            params = gnn.init_params(B, 3, rng)
            samples = [random_instance(rng, n=6, n_bands=B) for _ in range(3)]
            br = total_loss(params, make_batch(samples), None, TrainingConfig(tau=tau))
            assert br.values[1] >= 0.0
            assert br.values[0] <= B * tau * math.log(5)

    def test_loss_uses_true_csi(self, small, rng):
        params, samples = small
        truth = make_batch(samples)
        view = truth.with_csis([perturb_csi(c, 0.1, rng) for _, c in samples])
        fake = truth.with_csis([CsiTensor(c.h * 0.5, c.noise_variance) for _, c in samples])
        cfg = TrainingConfig()
        scored_true = total_loss(params, view, truth, cfg).values[0]
        scored_fake = total_loss(params, view, fake, cfg).values[0]
        scored_view = total_loss(params, view, view, cfg).values[0]
        assert scored_true != scored_fake
        assert scored_true != scored_view


def test_gradients_match_finite_differences(rng):
    while True:
        t, csi = random_instance(rng, n=4, n_bands=2, p=0.7)
        if t.n_edges >= 3:
            break
    params = gnn.init_params(2, 3, rng)
    batch = make_batch([(t, csi)])
    cfg = TrainingConfig(lam=1.0, delta=0.5)
    gradient_step(params, batch, batch, cfg)
    arrays = [p.values for p in params.parameters()]
    numeric = central_difference(lambda: total_loss(params, batch, batch, cfg).total.item(), arrays)
    for p, g in zip(params.parameters(), numeric):
        assert_grad_close(p.grad, g, rel=1e-4, floor=1e-7)


class TestTrain:
    def test_tiny_dataset_improves(self, rng):
        data = [random_instance(rng, n=6, n_bands=2) for _ in range(8)]
        params = gnn.init_params(2, 4, np.random.default_rng(0))
        _, trace = train(params, data, TrainingConfig(epochs=200))
        losses = trace.rate_losses()
        assert losses[-1] < losses[0] - 0.1 * abs(losses[0])

    def test_deterministic(self, small):
        params, samples = small
        cfg = TrainingConfig(epochs=3, batch_size=2, optimizer="adam", lr=1e-2)
        a, ta = train(params, samples, cfg)
        b, tb = train(params, samples, cfg)
        for name in a.names():
            assert np.array_equal(a[name].values, b[name].values)
        assert [r.rate_loss for r in ta.epochs] == [r.rate_loss for r in tb.epochs]

    def test_does_not_modify_input(self, small):
        params, samples = small
        before = params.to_arrays()
        train(params, samples, TrainingConfig(epochs=1, lr=0.1))
        for k, v in before.items():
            assert np.array_equal(params[k].values, v)

    def test_full_batch_gradient_is_shuffle_invariant(self, small):
        params, samples = small
        outs = []
        for seed in (0, 1, 2):
            cfg = TrainingConfig(epochs=2, lam=0.0, n_batches=1, train_csi="true", seed=seed)
            outs.append(train(params, samples, cfg)[0])
        for other in outs[1:]:
            for name in params.names():
                assert np.array_equal(outs[0][name].values, other[name].values)

    def test_zero_noise_perturbation_equals_clean(self, small):
        params, samples = small
        a, _ = train(params, samples, TrainingConfig(epochs=2, sigma_train=0.0))
        b, _ = train(params, samples, TrainingConfig(epochs=2, train_csi="true"))
        for name in params.names():
            assert np.array_equal(a[name].values, b[name].values)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_snapshot(self, small):
        params, samples = small
        params["decoder.out.b"].values[...] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(params, samples, TrainingConfig(epochs=1))
        assert info.value.snapshot["epoch"] == 0 and "params" in info.value.snapshot

    def test_rejects_bad_inputs(self, small):
        params, samples = small
        with pytest.raises(ValueError):
            train(params, [], TrainingConfig())
        with pytest.raises(ValueError):
            train(params, samples, TrainingConfig(n_rounds=3))

    @pytest.mark.parametrize("kwargs", [dict(lr=0), dict(tau=0), dict(n_rounds=1), dict(lam=-1),
                                        dict(train_csi="oracle"), dict(optimizer="rmsprop")])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainingConfig(**kwargs)

    def test_tau_schedule(self):
        assert TrainingConfig(tau=0.1).tau_at(7) == 0.1
        cfg = TrainingConfig(tau=0.4, tau_final=0.1, epochs=3)
        assert [cfg.tau_at(e) for e in range(3)] == pytest.approx([0.4, 0.2, 0.1])


def test_clip_and_adam():
    p = dt.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([30.0, 40.0])
    assert clip_gradients([p], 10.0) == pytest.approx(50.0)
    np.testing.assert_allclose(p.grad, [6.0, 8.0])
    Adam(0.1).step([p])
    # the first bias-corrected Adam step has magnitude lr in each coordinate
    np.testing.assert_allclose(p.values, [-0.1, -0.1], rtol=1e-6)
