"""Boundary/prototype contrastive losses and streaming moment tests."""

import numpy as np
import pytest

from ambiseg import contrastive as K
from ambiseg.network import FormatError
from ambiseg.tensor import Tape, Tensor

from helpers import grad_check


# -- boundary extraction ---------------------------------------------------

def test_single_center_voxel_has_26_boundary_neighbors():
    m = np.zeros((5, 5, 5), dtype=np.int64)
    m[2, 2, 2] = 1
    idx = K.extract_boundary(m)
    assert len(idx) == 26
    # exactly the 3^3 cube minus the voxel itself
    want = sorted(np.ravel_multi_index((i, j, k), (5, 5, 5))
                  for i in (1, 2, 3) for j in (1, 2, 3) for k in (1, 2, 3)
                  if (i, j, k) != (2, 2, 2))
    assert list(idx) == want


def test_boundary_of_trivial_masks_is_empty():
    assert len(K.extract_boundary(np.zeros((4, 4, 4)))) == 0
    assert len(K.extract_boundary(np.ones((4, 4, 4)))) == 0  # nothing outside


def test_boundary_is_outside_the_mask():
    rng = np.random.default_rng(80)
    m = (rng.uniform(size=(8, 8, 8)) < 0.3).astype(np.int64)
    idx = K.extract_boundary(m)
    assert not np.any(m.ravel()[idx])


def test_boundary_validates_input():
    with pytest.raises(ValueError):
        K.extract_boundary(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        K.extract_boundary(np.full((3, 3, 3), 2.0))


def test_sampling_respects_cap_and_is_without_replacement():
    m = np.zeros((6, 6, 6), dtype=np.int64)
    m[2:4, 2:4, 2:4] = 1
    boundary = K.extract_boundary(m)
    lab = m.copy()
    px = K.sample_boundary_pixels(boundary, lab, cap=10,
                                  rng=np.random.default_rng(3))
    assert len(px) == 10
    assert len(np.unique(px.indices)) == 10
    assert set(px.indices) <= set(boundary)
    big = K.sample_boundary_pixels(boundary, lab, cap=10_000,
                                   rng=np.random.default_rng(3))
    assert len(big) == len(boundary)
    empty = K.sample_boundary_pixels(np.empty(0, dtype=np.intp), lab, cap=5,
                                     rng=np.random.default_rng(3))
    assert len(empty) == 0


def test_gather_features_matches_direct_indexing():
    rng = np.random.default_rng(81)
    proj = rng.standard_normal((16, 3, 3, 3))
    idx = np.array([0, 5, 26, 13])
    got = K.gather_features(Tensor(proj), idx).data
    want = proj.reshape(16, -1)[:, idx].T
    assert np.array_equal(got, want)


# -- boundary InfoNCE ------------------------------------------------------

def bcl_oracle(feats, labs, tau):
    """Double loop over pixels and their positive sets."""
    n = len(labs)
    sims = feats @ feats.T / tau
    total = 0.0
    for i in range(n):
        pos = [j for j in range(n) if j != i and labs[j] == labs[i]]
        if not pos:
            continue
        others = [j for j in range(n) if j != i]
        lse = np.log(np.exp(sims[i, others]).sum())
        total += lse - sims[i, pos].mean()
    return total


def test_bcl_matches_double_loop_oracle():
    rng = np.random.default_rng(82)
    for _ in range(5):
        n = 9
        proj = rng.standard_normal((16, 4, 4, 4))
        proj /= np.sqrt((proj ** 2).sum(axis=0, keepdims=True))
        idx = rng.choice(64, size=n, replace=False)
        labs = rng.integers(0, 2, size=n)
        px = K.BoundaryPixels(idx.astype(np.intp), labs.astype(np.int64))
        got = K.bcl_loss(Tensor(proj), px, tau1=0.07).item()
        want = bcl_oracle(proj.reshape(16, -1)[:, idx].T, labs, 0.07)
        assert abs(got - want) < 1e-9
        assert got >= 0.0  # lse over a superset dominates the positive mean


def test_bcl_opposite_class_pair_contributes_nothing():
    rng = np.random.default_rng(83)
    proj = rng.standard_normal((16, 3, 3, 3))
    px = K.BoundaryPixels(np.array([1, 2], dtype=np.intp),
                          np.array([0, 1], dtype=np.int64))
    out = K.bcl_loss(Tensor(proj), px)
    assert out.item() == 0.0


def test_bcl_input_validation():
    proj = Tensor(np.zeros((16, 3, 3, 3)))
    one = K.BoundaryPixels(np.array([0], dtype=np.intp),
                           np.array([0], dtype=np.int64))
    with pytest.raises(ValueError):
        K.bcl_loss(proj, one)
    with pytest.raises(ValueError):
        K.bcl_loss(Tensor(np.zeros((16, 27))), one)


def test_bcl_gradient():
    rng = np.random.default_rng(84)
    idx = np.array([0, 3, 7, 12, 20], dtype=np.intp)
    labs = np.array([0, 0, 1, 1, 0], dtype=np.int64)
    px = K.BoundaryPixels(idx, labs)
    p0 = rng.standard_normal((16, 3, 3, 3)) * 0.5
    assert grad_check(lambda p: K.bcl_loss(p, px, tau1=0.5), [p0]) < 1e-6


# -- streaming prototypes --------------------------------------------------

def test_two_point_merge_hand_oracle():
    v = np.zeros(16)
    w = np.zeros(16)
    v[0], w[0] = 1.0, -1.0
    v[3], w[3] = 2.0, 4.0
    protos = K.new_prototypes()
    feats = np.stack([v, w], axis=1)  # (16, 2)
    K.update_prototypes(protos, feats, np.array([0, 0]))
    p = protos[0]
    assert p.count == 2
    assert np.abs(p.mean - (v + w) / 2).max() < 1e-15
    want_cov = np.outer(v - w, v - w) / 4.0
    assert np.abs(p.cov - want_cov).max() < 1e-15
    assert protos[1].count == 0


def test_streaming_merge_equals_single_pass():
    rng = np.random.default_rng(85)
    X = rng.standard_normal((16, 1000))
    labs = rng.integers(0, 2, size=1000)
    for pieces in (1, 2, 3, 7, 50):
        protos = K.new_prototypes()
        for chunk_f, chunk_l in zip(np.array_split(X, pieces, axis=1),
                                    np.array_split(labs, pieces)):
            K.update_prototypes(protos, chunk_f, chunk_l)
        for c in (0, 1):
            sel = labs == c
            mu = X[:, sel].mean(axis=1)
            Xc = X[:, sel] - mu[:, None]
            cov = (Xc @ Xc.T) / sel.sum()
            assert np.abs(protos[c].mean - mu).max() < 1e-9, pieces
            assert np.abs(protos[c].cov - cov).max() < 1e-9, pieces
            assert protos[c].count == sel.sum()


def test_update_rejects_frozen_and_bad_shapes():
    protos = K.freeze_prototypes(K.new_prototypes())
    with pytest.raises(ValueError):
        K.update_prototypes(protos, np.zeros((16, 4)), np.zeros(4))
    fresh = K.new_prototypes()
    with pytest.raises(ValueError):
        K.update_prototypes(fresh, np.zeros((8, 4)), np.zeros(4))
    with pytest.raises(ValueError):
        K.update_prototypes(fresh, np.zeros((16, 4)), np.zeros(5))


# -- prototype contrastive loss --------------------------------------------

def pcl_oracle(F, labs, protos, tau2):
    """Per-voxel loop: q_own + softplus(a_rival - a_own)."""
    total = 0.0
    for v in range(F.shape[0]):
        f = F[v]
        q = [f @ p.cov @ f for p in protos]
        a = [f @ p.mean / tau2 + q[c] / (2 * tau2 ** 2)
             for c, p in enumerate(protos)]
        own = labs[v]
        total += q[own] + np.logaddexp(0.0, a[1 - own] - a[own])
    return total / F.shape[0]


def _fitted_protos(rng):
    X = rng.standard_normal((16, 300))
    labs = rng.integers(0, 2, size=300)
    protos = K.new_prototypes()
    K.update_prototypes(protos, X, labs)
    return K.freeze_prototypes(protos)


def test_pcl_matches_per_voxel_oracle():
    rng = np.random.default_rng(86)
    protos = _fitted_protos(rng)
    F = rng.standard_normal((30, 16))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    labs = rng.integers(0, 2, size=30)
    got = K.pcl_loss(Tensor(F.T.copy()), labs, protos, tau2=100.0).item()
    want = pcl_oracle(F, labs, protos, 100.0)
    assert abs(got - want) < 1e-12


def test_pcl_degenerate_prototypes_give_log_two():
    # zero mean, zero covariance for both classes: q = 0, a = 0 everywhere,
    # so each voxel contributes softplus(0) = ln 2
    protos = K.new_prototypes()
    for p in protos:
        p.count = 10
    K.freeze_prototypes(protos)
    rng = np.random.default_rng(87)
    F = rng.standard_normal((16, 20))
    labs = rng.integers(0, 2, size=20)
    got = K.pcl_loss(Tensor(F), labs, protos).item()
    assert abs(got - np.log(2.0)) < 1e-12


def test_pcl_gradient():
    rng = np.random.default_rng(88)
    protos = _fitted_protos(rng)
    labs = rng.integers(0, 2, size=12)
    F0 = rng.standard_normal((16, 12)) * 0.5
    assert grad_check(
        lambda F: K.pcl_loss(F, labs, protos, tau2=10.0), [F0]) < 1e-6


def test_pcl_validation():
    rng = np.random.default_rng(89)
    protos = _fitted_protos(rng)
    F = Tensor(np.zeros((16, 5)))
    with pytest.raises(ValueError):
        K.pcl_loss(F, np.zeros(5), K.new_prototypes())  # not frozen
    empty = K.freeze_prototypes(K.new_prototypes())
    with pytest.raises(ValueError):
        K.pcl_loss(F, np.zeros(5), empty)  # zero counts
    with pytest.raises(ValueError):
        K.pcl_loss(F, np.full(5, 2), protos)  # non-binary labels
    with pytest.raises(ValueError):
        K.pcl_loss(F, np.zeros(4), protos)  # count mismatch
    with pytest.raises(ValueError):
        K.pcl_loss(Tensor(np.zeros((8, 5))), np.zeros(5), protos)


# -- prototype file format -------------------------------------------------

def test_prototype_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(90)
    protos = _fitted_protos(rng)
    path = tmp_path / "protos.auac"
    K.save_prototypes(path, protos)
    back = K.load_prototypes(path)
    assert len(back) == 2
    for a, b in zip(protos, back):
        assert b.class_id == a.class_id
        assert b.count == a.count
        assert np.array_equal(b.mean, a.mean)
        assert np.array_equal(b.cov, a.cov)
        assert b.frozen  # loading implies estimation finished
    path2 = tmp_path / "again.auac"
    K.save_prototypes(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_prototype_golden_bytes(tmp_path):
    p = K.ClassPrototype(class_id=1, count=3,
                         mean=np.arange(16, dtype=np.float64),
                         cov=np.zeros((16, 16)))
    path = tmp_path / "one.auac"
    K.save_prototypes(path, [p])
    blob = path.read_bytes()
    want = (b"AUAC"
            + (1).to_bytes(4, "little")
            + (3).to_bytes(8, "little")
            + np.arange(16, dtype="<f8").tobytes()
            + bytes(8 * 256))
    assert blob == want


def test_prototype_format_errors(tmp_path):
    bad = tmp_path / "bad.auac"
    bad.write_bytes(b"WHAT" + bytes(100))
    with pytest.raises(FormatError):
        K.load_prototypes(bad)
    trunc = tmp_path / "trunc.auac"
    rng = np.random.default_rng(91)
    K.save_prototypes(trunc, _fitted_protos(rng))
    blob = trunc.read_bytes()
    trunc.write_bytes(blob[:-7])
    with pytest.raises(FormatError):
        K.load_prototypes(trunc)
