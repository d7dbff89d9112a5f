"""Network architecture, initialization, and checkpoint format tests."""

import numpy as np
import pytest

from ambiseg import network as N
from ambiseg.tensor import Tape, Tensor, tsum, mul

from helpers import grad_check


def test_output_shapes():
    rng = np.random.default_rng(0)
    params = N.init_params(2, 5, rng)
    tape = Tape()
    leaves = N.as_leaves(params, tape)
    vol = Tensor(rng.standard_normal((1, 1, 16, 16, 16)))
    out = N.forward(leaves, vol)
    assert out.mean.shape == (1, 2, 16, 16, 16)
    assert out.factor.shape == (1, 10, 16, 16, 16)
    assert out.diag_raw.shape == (1, 2, 16, 16, 16)
    assert out.proj.shape == (1, 16, 16, 16, 16)
    # unit norm everywhere except all-zero feature vectors, which stay zero
    norms = np.sqrt((out.proj.data ** 2).sum(axis=1))
    assert np.all((np.abs(norms - 1.0) < 1e-12) | (norms == 0.0))
    assert (np.abs(norms - 1.0) < 1e-12).mean() > 0.5


def test_forward_rejects_bad_volumes():
    params = N.init_params(2, 2, np.random.default_rng(0))
    leaves = N.as_leaves(params, requires_grad=False)
    with pytest.raises(ValueError):
        N.forward(leaves, Tensor(np.zeros((1, 2, 8, 8, 8))))
    with pytest.raises(ValueError):
        N.forward(leaves, Tensor(np.zeros((1, 1, 7, 8, 8))))  # odd dim
    with pytest.raises(ValueError):
        N.forward(leaves, Tensor(np.zeros((1, 1, 4, 4, 4))))  # too small


def test_init_statistics_and_determinism():
    params = N.init_params(2, 5, np.random.default_rng(7))
    again = N.init_params(2, 5, np.random.default_rng(7))
    for k in params:
        assert np.array_equal(params[k], again[k])
        if k.endswith(".b"):
            assert np.all(params[k] == 0.0)
    # He scaling: sample std of each weight block near sqrt(2/fan_in)
    for name, shape, fan_in in [("enc1.w", (8, 1, 3, 3, 3), 27),
                                ("down.w", (16, 8, 3, 3, 3), 8 * 27),
                                ("up.w", (16, 8, 2, 2, 2), 16 * 8),
                                ("mean.w", (2, 8, 1, 1, 1), 8)]:
        w = params[name]
        assert w.shape == shape
        expect = np.sqrt(2.0 / fan_in)
        assert abs(w.std() / expect - 1.0) < 0.5, name  # loose: few samples


def test_num_classes_and_rank_recovered_from_params():
    params = N.init_params(3, 4, np.random.default_rng(1))
    assert N.num_classes(params) == 3
    assert N.factor_rank(params) == 4


def test_zero_params_give_zero_heads():
    leaves = N.as_leaves(N.zero_params(2, 3), requires_grad=False)
    out = N.forward(leaves, Tensor(np.random.default_rng(3).standard_normal(
        (1, 1, 8, 8, 8))))
    assert np.all(out.mean.data == 0.0)
    assert np.all(out.factor.data == 0.0)
    assert np.all(out.diag_raw.data == 0.0)
    # zero projection vectors sit below the norm floor and stay zero
    assert np.all(out.proj.data == 0.0)


def test_whole_network_gradient_positive_cone():
    """End-to-end gradient check on a kink-free instance.

    Random instances put thousands of ReLU pre-activations near zero, where
    central differences straddle the kink and disagree with the one-sided
    analytic derivative. Keeping weights, biases, and inputs positive holds
    every ReLU in its linear region, so the check is exact.
    """
    rng = np.random.default_rng(42)
    params = N.init_params(2, 2, rng)
    positive = {}
    for k, v in params.items():
        positive[k] = np.abs(v) + (0.05 if k.endswith(".b") else 0.0)
    vol = rng.uniform(0.5, 1.5, size=(1, 1, 8, 8, 8))
    wsel = {"mean": rng.standard_normal((1, 2, 8, 8, 8)),
            "factor": rng.standard_normal((1, 4, 8, 8, 8)),
            "diag": rng.standard_normal((1, 2, 8, 8, 8))}
    names = sorted(positive)

    def build(*leaf_list):
        leaves = dict(zip(names, leaf_list))
        out = N.forward(leaves, Tensor(vol))
        return tsum(mul(out.mean, Tensor(wsel["mean"]))) + \
            tsum(mul(out.factor, Tensor(wsel["factor"]))) + \
            tsum(mul(out.diag_raw, Tensor(wsel["diag"])))

    # check a slice of coordinates per parameter to keep runtime sane:
    # full arrays for biases and head weights, spot-checks via tiny leaves
    small = {k: positive[k] for k in names}
    for probe in ("mean.b", "diag.b", "mean.w"):
        idx = names.index(probe)
        arrays = [small[k] for k in names]
        tape = Tape()
        leaves = [Tensor(a, requires_grad=True, tape=tape) for a in arrays]
        tape.backward(build(*leaves))
        analytic = leaves[idx].grad.copy()
        flat = arrays[idx].reshape(-1)
        ga = analytic.reshape(-1)
        h = 1e-4
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + h
            tape2 = Tape()
            fp = build(*[Tensor(a) for a in arrays]).item()
            flat[i] = kept - h
            fm = build(*[Tensor(a) for a in arrays]).item()
            flat[i] = kept
            numeric = (fp - fm) / (2 * h)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1.0)
            assert err < 1e-4, (probe, i, err)


# -- checkpoint format -----------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = N.init_params(2, 5, np.random.default_rng(9))
    path = tmp_path / "net.auap"
    N.save_checkpoint(path, params)
    back = N.load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].dtype == np.float64
        assert np.array_equal(back[k], params[k])
    # a second save of the loaded dict is byte-identical
    path2 = tmp_path / "net2.auap"
    N.save_checkpoint(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_golden_bytes(tmp_path):
    # one tiny parameter, layout frozen by hand
    path = tmp_path / "one.auap"
    N.save_checkpoint(path, {"a.b": np.array([1.0, -2.0])})
    blob = path.read_bytes()
    want = (b"AUAP"
            + (1).to_bytes(4, "little")
            + (3).to_bytes(2, "little") + b"a.b"
            + (1).to_bytes(1, "little")
            + (2).to_bytes(4, "little")
            + np.array([1.0, -2.0], dtype="<f8").tobytes())
    assert blob == want


def test_checkpoint_names_are_sorted_on_disk(tmp_path):
    path = tmp_path / "two.auap"
    N.save_checkpoint(path, {"zz": np.zeros(1), "aa": np.ones(1)})
    blob = path.read_bytes()
    assert blob.index(b"aa") < blob.index(b"zz")


def test_checkpoint_error_cases(tmp_path):
    p = tmp_path / "bad.auap"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(N.FormatError):
        N.load_checkpoint(p)
    p.write_bytes(b"AUAP" + (99).to_bytes(4, "little"))
    with pytest.raises(N.FormatError):
        N.load_checkpoint(p)
    # valid header then a truncated record
    good = tmp_path / "good.auap"
    N.save_checkpoint(good, {"w": np.arange(4.0)})
    blob = good.read_bytes()
    p.write_bytes(blob[:-5])
    with pytest.raises(N.FormatError):
        N.load_checkpoint(p)
