import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secc.datagen import ValidationError
from secc.network import (BackboneSpec, StudentParams, TeacherParams, cluster_branch, ema_update,
                          forward_student, forward_teacher, init_student, load_checkpoint, mi_global_disc,
                          mi_global_encode, mi_local_disc, save_checkpoint, teacher_from_student)

SPEC = BackboneSpec(input_dim=3, N=4, K=5, hidden_widths=(10, 8), H=2, D0=2, M=6, D1=3, disc_hidden=5)


@pytest.fixture
def student():
    return init_student(SPEC, 0)


def test_spec_requires_reshapeable_last_layer():
    with pytest.raises(ValidationError):
        BackboneSpec(input_dim=2, N=3, K=2, hidden_widths=(10, 7), H=2, D0=2).validate()


def test_outputs_normalized(student):
    x = np.random.default_rng(0).normal(size=(16, 3))
    out = forward_student(student, x)
    assert out.feature_map.shape == (16, 2, 2, 2) and out.pooled.shape == (16, 6)
    assert out.global_feat.shape == (16, 3)
    for p in (out.p_cls, out.p_clu):
        assert np.all(p > 0) and np.all(p < 1)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)


def test_zero_classifier_gives_uniform(student):
    student["cls.W"][:] = 0
    p = forward_student(student, np.ones(3)).p_cls
    np.testing.assert_allclose(p, 0.25, atol=1e-15)
    t = teacher_from_student(student)
    np.testing.assert_allclose(forward_teacher(t, np.ones(3)), 0.25, atol=1e-15)


def test_forward_determinism(student):
    x = np.random.default_rng(1).normal(size=(4, 3))
    a, b = forward_student(student, x), forward_student(student, x)
    for f in ("feature_map", "pooled", "p_cls", "p_clu", "global_feat"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    t = teacher_from_student(student)
    assert forward_teacher(t, x).tobytes() == forward_teacher(t, x).tobytes()


def test_shape_mismatch(student):
    with pytest.raises(ValidationError):
        forward_student(student, np.ones(4))


def test_teacher_copy_matches_student(student):
    t = teacher_from_student(student)
    x = np.random.default_rng(2).normal(size=(9, 3))
    assert np.array_equal(forward_teacher(t, x), forward_student(student, x).p_cls)
    assert not any(k.startswith(("clu", "mienc", "gdisc", "ldisc")) for k in t.keys())


def test_cluster_branch_hand_value():
    p = cluster_branch(np.array([1.0, 0.0]), np.eye(2), 1.0)
    np.testing.assert_allclose(p, [np.e / (np.e + 1), 1 / (np.e + 1)], atol=1e-12)


@pytest.mark.parametrize("c", [0.5, 3.7])
def test_cluster_branch_scale_invariance(c):
    rng = np.random.default_rng(3)
    W, x = rng.normal(size=(4, 6)), rng.normal(size=6)
    np.testing.assert_allclose(cluster_branch(c * x, W, 10.0), cluster_branch(x, W, 10.0), atol=1e-12)


def test_cluster_branch_identical_rows_and_errors():
    W = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]])
    p = cluster_branch(np.array([0.3, -1.0]), W, 4.0)
    assert p[0] == p[1]
    with pytest.raises(ValidationError):
        cluster_branch(np.zeros(2), W, 1.0)
    with pytest.raises(ValidationError):
        cluster_branch(np.ones(2), np.zeros((2, 2)), 1.0)


def test_ema_examples():
    s = init_student(SPEC, 0)
    t = teacher_from_student(s)
    for k in t.keys():
        t[k] = np.zeros_like(t[k])
        s[k] = np.ones_like(s[k])
    t1 = ema_update(t, s, 0.99)
    assert all(np.all(v == pytest.approx(0.01, abs=1e-15)) for v in t1.tensors.values())
    t0 = ema_update(t, s, 0.0)
    assert all(np.array_equal(t0[k], s[k]) for k in t0.keys())
    with pytest.raises(ValidationError):
        ema_update(t, s, 1.0)


@pytest.mark.parametrize("decay", [0.9, 0.99, 0.999])
def test_ema_contraction_closed_form(decay):
    s = init_student(SPEC, 1)
    t = teacher_from_student(init_student(SPEC, 2))
    gap0 = {k: np.abs(t[k] - s[k]) for k in t.keys()}
    for _ in range(10):
        t = ema_update(t, s, decay)
    for k in t.keys():
        np.testing.assert_allclose(np.abs(t[k] - s[k]), decay ** 10 * gap0[k], atol=1e-12, rtol=0)


def test_mi_global_encode_zero_map_and_h1():
    w = {"mienc.W": np.random.default_rng(0).normal(size=(3, 3, 2, 3)), "mienc.b": np.zeros(3)}
    np.testing.assert_array_equal(mi_global_encode(np.zeros((2, 2, 2)), w), np.zeros(3))
    cell = np.array([[[0.5, -2.0]]])
    # zero padding leaves only the centre tap
    np.testing.assert_allclose(mi_global_encode(cell, w), cell[0, 0] @ w["mienc.W"][1, 1], atol=1e-15)


def test_mi_global_encode_hand_convolution():
    fmap = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0  # identity tap
    k[1, 2, 0, 0] = 1.0  # right neighbour
    w = {"mienc.W": k, "mienc.b": np.array([0.5])}
    # convolved map: [[1+2, 2+0], [3+4, 4+0]] + 0.5; mean = 16/4 + 0.5
    assert mi_global_encode(fmap, w) == pytest.approx([4.5], abs=1e-15)


def _disc_weights(student, prefix):
    return {k: v for k, v in student.items() if k.startswith(prefix)}


def test_global_disc(student):
    rng = np.random.default_rng(4)
    g, pc, pu = rng.normal(size=(2, 3)), rng.dirichlet(np.ones(4), 2), rng.dirichlet(np.ones(5), 2)
    w = _disc_weights(student, "gdisc")
    scores = mi_global_disc(g, pc, pu, w)
    assert scores.shape == (2,) and np.all(np.isfinite(scores))
    swapped = mi_global_disc(g[::-1], pc[::-1], pu[::-1], w)
    np.testing.assert_array_equal(swapped, scores[::-1])
    zero = {k: np.zeros_like(v) for k, v in w.items()}
    np.testing.assert_array_equal(mi_global_disc(g, pc, pu, zero), 0.0)


def test_local_disc_zero_and_equivariance(student):
    rng = np.random.default_rng(5)
    spec = BackboneSpec(input_dim=3, N=4, K=5, hidden_widths=(27,), H=3, D0=3, M=6, D1=3, disc_hidden=5)
    s = init_student(spec, 1)
    w = _disc_weights(s, "ldisc")
    fm, pc, pu = rng.normal(size=(3, 3, 3)), rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
    v = mi_local_disc(fm, pc, pu, w)
    assert v.shape == (3, 3)
    perm = rng.permutation(9)
    fm_p = fm.reshape(9, 3)[perm].reshape(3, 3, 3)
    np.testing.assert_allclose(mi_local_disc(fm_p, pc, pu, w).ravel(), v.ravel()[perm], atol=1e-14)
    zero = {k: np.zeros_like(a) for k, a in w.items()}
    np.testing.assert_array_equal(mi_local_disc(fm, pc, pu, zero), 0.0)


def test_local_disc_h1_equals_stacked_affine_maps():
    spec = BackboneSpec(input_dim=3, N=4, K=5, hidden_widths=(2,), H=1, D0=2, M=6, D1=3, disc_hidden=5)
    s = init_student(spec, 3)
    rng = np.random.default_rng(6)
    fm, pc, pu = rng.normal(size=(1, 1, 2)), rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
    col = np.concatenate([fm[0, 0], pc, pu])
    h = np.maximum(col @ s["ldisc.0.W"] + s["ldisc.0.b"], 0)
    h = np.maximum(h @ s["ldisc.1.W"] + s["ldisc.1.b"], 0)
    expected = h @ s["ldisc.2.W"] + s["ldisc.2.b"]
    np.testing.assert_allclose(mi_local_disc(fm, pc, pu, _disc_weights(s, "ldisc")), expected.reshape(1, 1),
                               atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_checkpoint_round_trip(tmp_path_factory, seed):
    s = init_student(SPEC, seed)
    path = tmp_path_factory.mktemp("ck") / "s.txt"
    save_checkpoint(s, path)
    back = load_checkpoint(path, SPEC)
    assert isinstance(back, StudentParams)
    assert all(np.array_equal(back[k], s[k]) for k in s.keys())
    t = teacher_from_student(s)
    save_checkpoint(t, path)
    tb = load_checkpoint(path, SPEC, TeacherParams)
    assert set(tb.keys()) == set(t.keys())


def test_checkpoint_shape_check(tmp_path):
    s = init_student(SPEC, 0)
    save_checkpoint(s, tmp_path / "s.txt")
    other = BackboneSpec(input_dim=3, N=5, K=5, hidden_widths=(10, 8), H=2, D0=2, M=6, D1=3, disc_hidden=5)
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "s.txt", other)
