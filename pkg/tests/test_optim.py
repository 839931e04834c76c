import numpy as np
import pytest

from robustkit import Tensor, sgd_momentum_step, zero_velocity
from robustkit.errors import ConfigError


def _maps(value, grad, vel):
    p = {"w": Tensor(np.array(value, dtype=np.float32), name="w")}
    g = {"w": Tensor(np.array(grad, dtype=np.float32))}
    v = {"w": Tensor(np.array(vel, dtype=np.float32))}
    return p, g, v


class TestSgdMomentum:
    def test_plain_gradient_step(self):
        p, g, v = _maps([1.0, 2.0], [0.5, -0.5], [0.0, 0.0])
        newp, newv = sgd_momentum_step(p, g, v, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(newp["w"].data, [0.95, 2.05])
        assert np.allclose(newv["w"].data, [0.5, -0.5])

    def test_pure_velocity_step(self):
        p, g, v = _maps([1.0], [0.0], [1.0])
        newp, _ = sgd_momentum_step(p, g, v, lr=0.2, momentum=0.9, weight_decay=0.0)
        assert np.allclose(newp["w"].data, [1.0 - 0.2 * 0.9])

    def test_two_steps_match_scalar_recurrence(self):
        # f(theta) = theta^2 / 2, grad = theta, from theta=1 with lr 0.1, momentum 0.9
        theta, vel = 1.0, 0.0
        expected = []
        for _ in range(2):
            vel = 0.9 * vel + theta
            theta = theta - 0.1 * vel
            expected.append(theta)

        p = {"t": Tensor(np.array([1.0]), name="t")}
        v = zero_velocity(p)
        seen = []
        for _ in range(2):
            g = {"t": Tensor(p["t"].data.copy())}  # gradient of theta^2/2 is theta
            p, v = sgd_momentum_step(p, g, v, lr=0.1, momentum=0.9, weight_decay=0.0)
            seen.append(float(p["t"].data[0]))
        assert np.allclose(seen, expected, atol=1e-7)

    def test_weight_decay_enters_velocity(self):
        p, g, v = _maps([2.0], [0.0], [0.0])
        newp, newv = sgd_momentum_step(p, g, v, lr=1.0, momentum=0.0, weight_decay=0.1)
        assert np.allclose(newv["w"].data, [0.2])
        assert np.allclose(newp["w"].data, [1.8])

    def test_key_mismatch_is_config_error(self):
        p, g, v = _maps([1.0], [1.0], [0.0])
        g2 = {"other": g["w"]}
        with pytest.raises(ConfigError, match="keys"):
            sgd_momentum_step(p, g2, v, lr=0.1, momentum=0.9, weight_decay=0.0)

    def test_zero_velocity_matches_params(self):
        p = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(5))}
        v = zero_velocity(p)
        assert set(v) == {"a", "b"}
        assert v["a"].shape == (2, 3) and not v["a"].data.any()
