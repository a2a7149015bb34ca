import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boicr.midn import ImageSample, MidnParams, TrunkParams, classification_loss, midn_forward, trunk_forward
from boicr.model import Model
from boicr.numcore import ParamTensor, Tape


def _trunk(w1, b1, w2, b2):
    return TrunkParams(*(ParamTensor(n, np.asarray(v, dtype=np.float64))
                         for n, v in zip(("w1", "b1", "w2", "b2"), (w1, b1, w2, b2))))


def _head(w_cls, b_cls, w_det):
    return MidnParams(ParamTensor("wc", np.asarray(w_cls, float)), ParamTensor("bc", np.asarray(b_cls, float)),
                      ParamTensor("wd", np.asarray(w_det, float)))


def _forward(feats, head):
    tape = Tape()
    return midn_forward(tape, tape.constant(np.asarray(feats, float)), head)


class TestTrunk:
    def test_zero_weights(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        t = _trunk(np.zeros((3, 5)), np.zeros(5), np.zeros((5, 5)), np.zeros(5))
        tape = Tape()
        assert np.all(trunk_forward(tape, tape.constant(x), t).value == 0)

    def test_identity_preserves_nonnegative_input(self):
        x = np.abs(np.random.default_rng(1).normal(size=(6, 4)))
        t = _trunk(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4))
        tape = Tape()
        np.testing.assert_array_equal(trunk_forward(tape, tape.constant(x), t).value, x)

    def test_deterministic_output(self):
        x = np.random.default_rng(7).normal(size=(10, 32))

        def digest():
            m = Model(3, seed=7)
            tape = Tape()
            out = trunk_forward(tape, tape.constant(x), m.trunk).value
            return hashlib.sha256(out.tobytes()).hexdigest()

        assert digest() == digest()

    def test_shape_mismatch(self):
        t = _trunk(np.zeros((3, 5)), np.zeros(5), np.zeros((5, 5)), np.zeros(5))
        tape = Tape()
        with pytest.raises(ValueError, match="incompatible"):
            trunk_forward(tape, tape.constant(np.zeros((2, 4))), t)


class TestMidnForward:
    def test_single_class(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(5, 3))
        out = _forward(feats, _head(rng.normal(size=(3, 1)), [0.3], rng.normal(size=(3, 1))))
        np.testing.assert_array_equal(out.x_c.value, 1.0)
        np.testing.assert_array_equal(out.x_R.value, out.x_d.value)
        assert abs(1.0 - out.phi.value[0]) < 1e-12

    def test_symmetric_logits(self):
        out = _forward(np.zeros((2, 3)), _head(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2))))
        np.testing.assert_allclose(out.x_R.value, 0.25, atol=1e-15)
        np.testing.assert_allclose(out.phi.value, [0.5, 0.5], atol=1e-15)

    def test_phi_matches_loop_recomputation(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            c, r, d = int(rng.integers(1, 5)), int(rng.integers(1, 8)), 4
            feats = rng.normal(size=(r, d))
            wc, bc, wd = rng.normal(size=(d, c)), rng.normal(size=c), rng.normal(size=(d, c))
            out = _forward(feats, _head(wc, bc, wd))
            lc = feats @ wc + bc
            ld = feats @ wd
            for k in range(c):
                phi = 0.0
                for j in range(r):
                    pc = math.exp(lc[j, k]) / sum(math.exp(lc[j, i]) for i in range(c))
                    pd = math.exp(ld[j, k]) / sum(math.exp(ld[i, k]) for i in range(r))
                    phi += pc * pd
                assert out.phi.value[k] == pytest.approx(phi, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
    def test_probability_structure(self, c, r, seed):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(r, 4))
        out = _forward(feats, _head(rng.normal(size=(4, c)), rng.normal(size=c), rng.normal(size=(4, c))))
        np.testing.assert_allclose(out.x_c.value.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(out.x_d.value.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(out.x_R.value, out.x_c.value * out.x_d.value)
        assert np.all(out.x_R.value > 0) and np.all(out.x_R.value < 1)
        assert np.all(out.phi.value > 0) and np.all(out.phi.value < 1)


class TestClassificationLoss:
    def test_half(self):
        assert classification_loss(np.array([0.5]), np.array([1])) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect(self):
        assert classification_loss(np.array([1 - 1e-12, 1e-12]), np.array([1, 0])) < 1e-11

    def test_hand_value(self):
        loss = classification_loss(np.array([0.9, 0.2, 0.7]), np.array([1, 0, 1]))
        assert loss == pytest.approx(0.685179, abs=1e-6)
        assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8) + math.log(0.7)), abs=1e-15)

    def test_clamped_extremes_finite(self):
        loss = classification_loss(np.array([0.0, 1.0]), np.array([1, 0]))
        assert loss == pytest.approx(-math.log(1e-12) - math.log(1 - (1 - 1e-12)), rel=1e-12)

    @given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
    def test_nonnegative(self, phi, seed):
        labels = np.random.default_rng(seed).integers(0, 2, size=len(phi))
        assert classification_loss(np.array(phi), labels) >= 0


def test_classification_gradient_matches_finite_differences():
    from boicr.numcore import grad_check

    rng = np.random.default_rng(4)
    for seed in range(5):
        m = Model(3, num_agents=0, raw_dim=5, trunk_dim=6, distill=False, seed=seed)
        for p in m.parameters():
            p.value[...] = rng.normal(0.0, 0.6, size=p.shape)
        feats = rng.normal(size=(7, 5))
        labels = np.array([1, 0, 1])
        params = m.trunk.tensors() + m.midn.tensors()

        def loss():
            tape = Tape()
            out = midn_forward(tape, trunk_forward(tape, tape.constant(feats), m.trunk), m.midn)
            return tape, tape.image_cross_entropy(out.phi, labels)

        for p in params:
            p.zero_grad()
        tape, root = loss()
        tape.backward(root)
        assert grad_check(lambda: float(loss()[1].value), params) < 1e-4


class TestImageSample:
    def test_feature_rows_must_match(self):
        with pytest.raises(ValueError, match="2 proposals"):
            ImageSample("x", [1], np.zeros((2, 4)), np.zeros((3, 5)))

    def test_training_view_hides_ground_truth(self):
        s = ImageSample("x", [1], np.zeros((1, 4)), np.zeros((1, 2)), gt=[])
        view = s.training_view()
        assert not hasattr(view, "gt")
        assert view._fields == ("image_id", "labels", "proposals", "features")
