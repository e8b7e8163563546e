import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ssacgan.losses import (LossWeights, generator_objective, loss_cycle, loss_disc_pair,
                            loss_disc_single, loss_gen_adv, loss_gen_pair, loss_gen_total)
from ssacgan.tensor import Tensor

TOL = 1e-6


def const(v, shape=(1, 1, 6, 6)):
    return Tensor(np.full(shape, v))


def loop_mean_sq(m, target):
    flat = np.asarray(m, dtype=np.float64).ravel()
    acc = 0.0
    for v in flat:
        acc += (v - target) ** 2
    return acc / len(flat)


def loop_mean_abs(a, b):
    fa, fb = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    acc = 0.0
    for u, v in zip(fa, fb):
        acc += abs(u - v)
    return acc / len(fa)


@pytest.fixture
def maps():
    rng = np.random.default_rng(42)
    return [rng.uniform(-0.5, 1.5, size=(2, 1, 5, 5)).astype(np.float32) for _ in range(4)]


class TestSingleDiscriminator:
    def test_perfect(self):
        assert loss_disc_single(const(1.0), const(0.0)).item() == 0.0

    def test_half_everywhere(self):
        assert loss_disc_single(const(0.5), const(0.5)).item() == pytest.approx(0.5, abs=TOL)

    def test_loop_oracle(self, maps):
        got = loss_disc_single(Tensor(maps[0]), Tensor(maps[1])).item()
        assert got == pytest.approx(loop_mean_sq(maps[0], 1.0) + loop_mean_sq(maps[1], 0.0), abs=TOL)


class TestGeneratorAdversarial:
    @pytest.mark.parametrize("value,expected", [(1.0, 0.0), (0.0, 1.0)])
    def test_constants(self, value, expected):
        assert loss_gen_adv(const(value)).item() == expected

    def test_loop_oracle(self, maps):
        assert loss_gen_adv(Tensor(maps[2])).item() == pytest.approx(loop_mean_sq(maps[2], 1.0), abs=TOL)

    def test_gradient_step_decreases_loss(self, maps):
        d = Tensor(maps[3], requires_grad=True)
        before = loss_gen_adv(d)
        before.backward()
        stepped = Tensor(maps[3] - 0.1 * d.grad)
        assert loss_gen_adv(stepped).item() < before.item()


class TestCycle:
    def test_perfect_reconstruction(self, maps):
        x, y = Tensor(maps[0]), Tensor(maps[1])
        assert loss_cycle(x, x, y, y).item() == 0.0

    def test_constant_offset(self, maps):
        x, y = Tensor(maps[0]), Tensor(maps[1])
        assert loss_cycle(x, Tensor(maps[0] + np.float32(0.2)), y, y).item() == pytest.approx(0.2, abs=TOL)

    def test_loop_oracle(self, maps):
        got = loss_cycle(Tensor(maps[0]), Tensor(maps[1]), Tensor(maps[2]), Tensor(maps[3])).item()
        want = loop_mean_abs(maps[1], maps[0]) + loop_mean_abs(maps[3], maps[2])
        assert got == pytest.approx(want, abs=TOL)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_cycle(const(0.0), const(0.0, (1, 1, 4, 4)), const(0.0), const(0.0))


class TestPairedDiscriminator:
    def test_perfect(self):
        assert loss_disc_pair(const(1.0), const(0.0), const(0.0), const(0.0)).item() == 0.0

    def test_half_everywhere_is_exactly_half(self):
        assert loss_disc_pair(const(0.5), const(0.5), const(0.5), const(0.5)).item() == 0.5

    def test_loop_oracle(self, maps):
        got = loss_disc_pair(*[Tensor(m) for m in maps]).item()
        want = loop_mean_sq(maps[0], 1.0) + (loop_mean_sq(maps[1], 0.0) + loop_mean_sq(maps[2], 0.0)
                                             + loop_mean_sq(maps[3], 0.0)) / 3.0
        assert got == pytest.approx(want, abs=TOL)


class TestPairedGenerator:
    def test_fooled(self):
        assert loss_gen_pair(const(1.0), const(1.0), const(1.0)).item() == 0.0

    def test_zero_maps_is_exactly_three(self):
        assert loss_gen_pair(const(0.0), const(0.0), const(0.0)).item() == 3.0

    def test_loop_oracle(self, maps):
        got = loss_gen_pair(*[Tensor(m) for m in maps[1:]]).item()
        want = sum(loop_mean_sq(m, 1.0) for m in maps[1:])
        assert got == pytest.approx(want, abs=TOL)

    def test_normalized_ablation(self):
        assert loss_gen_pair(const(0.0), const(0.0), const(0.0), normalize=True).item() == pytest.approx(1.0)


class TestTotal:
    def test_default_weights(self):
        assert loss_gen_total(0.5, 0.1, 0.2, LossWeights()) == pytest.approx(1.9, abs=TOL)

    def test_alpha_zero_is_plain_cycle_objective(self):
        w = LossWeights(alpha=0.0)
        assert loss_gen_total(0.5, 0.1, 123.0, w) == pytest.approx(0.5 + 10 * 0.1, abs=TOL)

    def test_zero(self):
        assert loss_gen_total(0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lam=-1.0)

    def test_generator_objective_decomposes(self, maps):
        w = LossWeights()
        cyc, pair = Tensor(np.float32(0.3)), Tensor(np.float32(0.7))
        total, adv = generator_objective(Tensor(maps[0]), cyc, pair, w)
        assert total.item() == pytest.approx(adv.item() + 10 * 0.3 + 2 * 0.7, abs=1e-5)

    def test_symmetric_use(self, maps):
        """Same function serves both directions; swapped inputs give swapped outputs."""
        w = LossWeights()
        cyc, pair = Tensor(np.float32(0.1)), Tensor(np.float32(0.0))
        g_total, _ = generator_objective(Tensor(maps[0]), cyc, pair, w)
        f_total, _ = generator_objective(Tensor(maps[1]), cyc, pair, w)
        assert g_total.item() - f_total.item() == pytest.approx(
            loss_gen_adv(Tensor(maps[0])).item() - loss_gen_adv(Tensor(maps[1])).item(), abs=1e-6)


finite_maps = arrays(np.float32, (1, 1, 3, 3), elements=st.floats(-5, 5, width=32))


class TestNonNegativity:
    @settings(max_examples=50, deadline=None)
    @given(finite_maps, finite_maps, finite_maps, finite_maps)
    def test_all_losses_non_negative(self, a, b, c, d):
        ts = [Tensor(m) for m in (a, b, c, d)]
        assert loss_disc_single(ts[0], ts[1]).item() >= 0
        assert loss_gen_adv(ts[0]).item() >= 0
        assert loss_cycle(*ts).item() >= 0
        assert loss_disc_pair(*ts).item() >= 0
        assert loss_gen_pair(*ts[1:]).item() >= 0
