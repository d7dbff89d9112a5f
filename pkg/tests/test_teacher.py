"""Mean-teacher update and input perturbation tests."""

import numpy as np
import pytest

from ambiseg import teacher as M
from ambiseg.tensor import Tensor


def test_ema_hand_example():
    t = {"w": np.array([1.0, 2.0])}
    s = {"w": np.array([3.0, 6.0])}
    M.ema_update(t, s, decay=0.5)
    assert np.array_equal(t["w"], np.array([2.0, 4.0]))
    M.ema_update(t, s, decay=0.0)  # decay 0 copies the student
    assert np.array_equal(t["w"], s["w"])


def test_ema_is_in_place_and_convergent():
    rng = np.random.default_rng(70)
    t = {"w": rng.standard_normal(5)}
    s = {"w": rng.standard_normal(5)}
    ref = t["w"]
    for _ in range(2000):
        M.ema_update(t, s, decay=0.99)
    assert t["w"] is ref  # same buffer, mutated in place
    assert np.abs(t["w"] - s["w"]).max() < 1e-6


def test_ema_validates_inputs():
    with pytest.raises(ValueError):
        M.ema_update({"w": np.ones(2)}, {"w": np.ones(2)}, decay=1.0)
    with pytest.raises(ValueError):
        M.ema_update({"w": np.ones(2)}, {"w": np.ones(2)}, decay=-0.1)
    with pytest.raises(ValueError):
        M.ema_update({"w": np.ones(2)}, {"v": np.ones(2)})
    with pytest.raises(ValueError):
        M.ema_update({"w": np.ones(2)}, {"w": np.ones(3)})


def test_perturb_noise_is_clipped_and_has_expected_spread():
    rng = np.random.default_rng(71)
    x = np.zeros(1_000_000)
    y = M.perturb_input(x, noise_std=0.1, clip=0.2, rng=rng)
    noise = y - x
    assert np.abs(noise).max() <= 0.2
    # clipping a N(0, 0.1^2) at +-2 sigma shrinks the std slightly
    assert 0.095 < noise.std() < 0.105
    assert abs(noise.mean()) < 1e-3


def test_perturb_accepts_tensor_and_requires_rng():
    x = Tensor(np.ones((2, 3)))
    out = M.perturb_input(x, rng=np.random.default_rng(1))
    assert isinstance(out, Tensor)
    assert out.data.shape == (2, 3)
    assert not np.array_equal(out.data, x.data)
    with pytest.raises(ValueError):
        M.perturb_input(np.ones(3))


def test_perturb_is_reproducible_under_seed():
    a = M.perturb_input(np.zeros(10), rng=np.random.default_rng(5))
    b = M.perturb_input(np.zeros(10), rng=np.random.default_rng(5))
    assert np.array_equal(a, b)
