"""Analytic gradients against central finite differences (step 1e-5, float64)."""
import numpy as np
import pytest

from secc import losses as L
from secc.network import (BackboneSpec, StudentParams, cosine_softmax, cosine_softmax_backward, init_student,
                          teacher_from_student)
from secc.objective import ObjectiveTerms, compute_objective

STEP = 1e-5
TOL = 1e-4
N_CONFIGS = 24
N_COORDS = 25


FLOOR = 1e-4  # below this magnitude the check is effectively absolute (roundoff in the total is ~1e-9)


def rel_err(a, n):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def numeric_grad(f, x):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + STEP
        up = f(x)
        x[i] = old - STEP
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * STEP)
    return g


def _dists(rng, n):
    return rng.dirichlet(np.ones(n))


# ------------------------------------------------------------ single losses

@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_grad(seed):
    rng = np.random.default_rng(seed)
    p, y = _dists(rng, 5), int(rng.integers(5))
    assert rel_err(L.cross_entropy_grad(p, y), numeric_grad(lambda q: L.cross_entropy(q, y), p)).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_self_ensembling_grad(seed):
    rng = np.random.default_rng(seed)
    ps, pt = _dists(rng, 4), _dists(rng, 4)
    num = numeric_grad(lambda q: L.self_ensembling_loss(q, pt), ps)
    assert rel_err(L.self_ensembling_grad(ps, pt), num).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_conditional_entropy_grad(seed):
    p = _dists(np.random.default_rng(seed), 6)
    assert rel_err(L.conditional_entropy_grad(p), numeric_grad(L.conditional_entropy, p)).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_kl_grad(seed):
    rng = np.random.default_rng(seed)
    pt, p = _dists(rng, 5), _dists(rng, 5)
    num = numeric_grad(lambda q: L.kl_cluster_loss(pt, q), p)
    assert rel_err(L.kl_cluster_grad(pt, p), num).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_constraint_grad(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 6))
    mu = rng.normal(size=(4, 6))
    cmu = (mu / np.linalg.norm(mu, axis=1, keepdims=True)) @ (mu / np.linalg.norm(mu, axis=1, keepdims=True)).T
    num = numeric_grad(lambda w: L.inter_cluster_constraint(w, cmu), W)
    assert rel_err(L.inter_cluster_constraint_grad(W, cmu), num).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_mi_grads(seed):
    rng = np.random.default_rng(seed)
    pos, neg = rng.normal(0, 2, 6), rng.normal(0, 2, 6)
    gp, gn = L.mi_global_grad(pos, neg)
    assert rel_err(gp, numeric_grad(lambda v: L.mi_global_objective(v, neg), pos)).max() < TOL
    assert rel_err(gn, numeric_grad(lambda v: L.mi_global_objective(pos, v), neg)).max() < TOL
    pm, nm = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    gp, gn = L.mi_local_grad(pm, nm)
    assert rel_err(gp, numeric_grad(lambda v: L.mi_local_objective(v, nm), pm)).max() < TOL
    assert rel_err(gn, numeric_grad(lambda v: L.mi_local_objective(pm, v), nm)).max() < TOL


@pytest.mark.parametrize("seed", range(5))
def test_cosine_softmax_backward(seed):
    rng = np.random.default_rng(seed)
    x, W, w = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(3, 4))
    p, cache = cosine_softmax(x, W, 7.0)
    dx, dW = cosine_softmax_backward(cache, w)
    assert rel_err(dx, numeric_grad(lambda v: (cosine_softmax(v, W, 7.0)[0] * w).sum(), x)).max() < TOL
    assert rel_err(dW, numeric_grad(lambda v: (cosine_softmax(x, v, 7.0)[0] * w).sum(), W)).max() < TOL


# ------------------------------------------------------------ end to end

def _config(i):
    rng = np.random.default_rng(1000 + i)
    N, K, B, d = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(3, 7)), int(rng.integers(2, 4))
    spec = BackboneSpec(input_dim=d, N=N, K=K, hidden_widths=(8, 8), H=2, D0=2, M=6, D1=3, disc_hidden=5)
    flags = [bool(v) for v in rng.integers(0, 2, 4)] if i >= 4 else [True] * 4
    terms = ObjectiveTerms(*flags, rho=float(rng.uniform(2, 12)), alpha=float(rng.choice([1.0, 5.0])),
                           beta=float(rng.choice([1e-3, 1e-2, 0.5])), constraint_weight=float(rng.uniform(0.2, 1)))
    mu = rng.normal(size=(K, 6))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    data = dict(src_x=rng.normal(size=(B, d)), src_y=rng.integers(0, N, B), tgt_xs=rng.normal(size=(B, d)),
                tgt_xt=rng.normal(size=(B, d)), p_tilde=rng.dirichlet(np.ones(K), B), centroid_cos=mu @ mu.T)
    return spec, terms, data, rng


def _student_off_kinks(spec, seed, rng):
    # zero biases put dead-unit pre-activations exactly on the ReLU kink
    s = init_student(spec, seed)
    for k in s.keys():
        if k.endswith(".b"):
            s[k] = rng.normal(0, 0.1, s[k].shape)
    return s


@pytest.mark.parametrize("i", range(N_CONFIGS))
def test_end_to_end_total_gradient_at_step_zero(i):
    spec, terms, data, rng = _config(i)
    student = _student_off_kinks(spec, i, rng)
    teacher = teacher_from_student(student)
    _, grads = compute_objective(student, teacher, **data, terms=terms)

    keys = sorted(student.keys())
    coords = [(keys[int(rng.integers(len(keys)))],) for _ in range(N_COORDS)]
    worst = 0.0
    for (k,) in coords:
        idx = tuple(int(rng.integers(s)) for s in student[k].shape)

        def f(v):
            t = dict(student.tensors)
            t[k] = student[k].copy()
            t[k][idx] = v
            return compute_objective(StudentParams(spec, t), teacher, **data, terms=terms,
                                     need_grad=False)[0].total

        v0 = student[k][idx]
        num = (f(v0 + STEP) - f(v0 - STEP)) / (2 * STEP)
        worst = max(worst, float(rel_err(grads[k][idx], num)))
    assert worst <= TOL, f"config {i}: worst relative error {worst:.3g}"


def test_disabled_terms_have_no_gradient_on_their_modules():
    spec, terms, data, _ = _config(0)
    student = init_student(spec, 0)
    off = ObjectiveTerms(use_se=True, use_cde=False, use_kl=False, use_mim=False)
    _, grads = compute_objective(student, teacher_from_student(student), **data, terms=off)
    for k in student.keys():
        if k.startswith(("clu.", "mienc.", "gdisc.", "ldisc.")):
            assert not np.any(grads[k]), k
