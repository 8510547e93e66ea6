"""Composite training objective over one source batch and one target batch.

Every data term is a batch mean. Negatives for the mutual-information
estimators pair each anchor's distributions with the global feature / feature
map of the next sample in the batch (cyclic shift by one).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .network import (StudentParams, TeacherParams, forward_student, forward_teacher, global_disc_backward,
                      global_disc_forward, local_disc_backward, local_disc_forward, student_backward)


@dataclass(frozen=True)
class ObjectiveTerms:
    use_se: bool = True
    use_cde: bool = True
    use_kl: bool = True
    use_mim: bool = True
    rho: float = 10.0
    alpha: float = 1.0
    beta: float = 1e-3
    constraint_weight: float = 1.0


def compute_objective(student: StudentParams, teacher: TeacherParams, src_x, src_y, tgt_xs, tgt_xt,
                      p_tilde, centroid_cos, terms: ObjectiveTerms, need_grad: bool = True):
    """Return (LossBreakdown, grads). ``grads`` maps student tensor names to arrays.

    ``tgt_xs``/``tgt_xt`` are the student and teacher views of the same
    target samples; ``p_tilde`` holds their inherent cluster distributions.
    """
    parts = L.LossBreakdown()
    grads: dict = {}
    spec = student.spec

    # source: supervised cross entropy
    src = forward_student(student, src_x, terms.rho, with_cluster=False, with_mi=False)
    p, y = src.p_cls, np.asarray(src_y, dtype=np.int64)
    Bs = len(y)
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise L.ValidationError("source label outside classifier head")
    py = p[np.arange(Bs), y]
    parts.l_cse = float(-np.log(np.maximum(py, L.EPS)).mean())
    if need_grad:
        d_p = np.zeros_like(p)
        d_p[np.arange(Bs), y] = np.where(py > L.EPS, -1.0 / np.maximum(py, L.EPS), 0.0) / Bs
        student_backward(student, src, d_pcls=d_p, grads=grads)

    use_target = terms.use_se or terms.use_cde or terms.use_kl or terms.use_mim
    if use_target:
        need_clu = terms.use_kl or terms.use_mim
        tgt = forward_student(student, tgt_xs, terms.rho, with_cluster=need_clu, with_mi=terms.use_mim)
        pt = tgt.p_cls
        Bt = len(pt)
        d_pcls = np.zeros_like(pt)
        d_pclu = np.zeros((Bt, spec.K)) if need_clu else None
        d_global = d_fmap = None

        if terms.use_se:
            q = forward_teacher(teacher, tgt_xt)
            parts.l_se = float(((pt - q) ** 2).sum(1).mean())
            d_pcls += 2.0 * (pt - q) / Bt
        if terms.use_cde:
            parts.l_cde = float(-(pt * np.log(np.maximum(pt, L.EPS))).sum(1).mean())
            d_pcls += L.conditional_entropy_grad(pt) / Bt
        if terms.use_kl:
            pc = tgt.p_clu
            pos = p_tilde > 0
            ptl = np.where(pos, p_tilde, 1.0)
            parts.l_kl = float(np.where(pos, p_tilde * (np.log(ptl) - np.log(np.maximum(pc, L.EPS))),
                                        0.0).sum(1).mean())
            d_pclu += L.kl_cluster_grad(p_tilde, pc) / Bt
            parts.l_constraint = terms.constraint_weight * L.inter_cluster_constraint(student["clu.W"],
                                                                                      centroid_cos)
            if need_grad:
                grads["clu.W"] = grads.get("clu.W", 0) + terms.constraint_weight * \
                    L.inter_cluster_constraint_grad(student["clu.W"], centroid_cos)
        if terms.use_mim:
            if Bt < 2:
                raise L.MIBatchTooSmall("mutual-information terms need at least 2 target samples per batch")
            g, fm, pc = tgt.global_feat, tgt.feature_map, tgt.p_clu
            cond = np.concatenate([pt, pc], axis=1)
            g_in = np.concatenate([np.concatenate([g, cond], 1),
                                   np.concatenate([np.roll(g, -1, axis=0), cond], 1)])
            g_scores, g_cache = global_disc_forward(student, g_in)
            l_scores, l_cache = local_disc_forward(student, np.concatenate([fm, np.roll(fm, -1, axis=0)]),
                                                   np.concatenate([pt, pt]), np.concatenate([pc, pc]))
            g_pos, g_neg = g_scores[:Bt], g_scores[Bt:]
            l_pos, l_neg = l_scores[:Bt], l_scores[Bt:]
            parts.l_g_jsd = L.mi_global_objective(g_pos, g_neg)
            parts.l_l_jsd = L.mi_local_objective(l_pos, l_neg)
            parts.l_mim = L.mim_objective(parts.l_g_jsd, parts.l_l_jsd, terms.alpha)
            if need_grad:
                coef = -terms.beta
                dgp, dgn = L.mi_global_grad(g_pos, g_neg)
                dlp, dln = L.mi_local_grad(l_pos, l_neg)
                d_gin = global_disc_backward(student, g_cache, coef * terms.alpha * np.concatenate([dgp, dgn]),
                                             grads)
                D1, N = spec.D1, spec.N
                d_global = d_gin[:Bt, :D1] + np.roll(d_gin[Bt:, :D1], 1, axis=0)
                d_cond = d_gin[:Bt, D1:] + d_gin[Bt:, D1:]
                d_lfm, d_lcond = local_disc_backward(student, l_cache, coef * np.concatenate([dlp, dln]),
                                                     grads, spec.D0)
                d_fmap = d_lfm[:Bt] + np.roll(d_lfm[Bt:], 1, axis=0)
                d_cond = d_cond + d_lcond[:Bt] + d_lcond[Bt:]
                d_pcls += d_cond[:, :N]
                d_pclu += d_cond[:, N:]
        if need_grad:
            student_backward(student, tgt, d_pcls=d_pcls, d_pclu=d_pclu, d_global=d_global, d_fmap=d_fmap,
                             grads=grads)

    L.total_loss(parts, terms.beta)
    if need_grad:
        for k, v in student.items():
            g = grads.get(k)
            grads[k] = np.zeros_like(v) if g is None or np.isscalar(g) else np.asarray(g, dtype=np.float64)
    return parts, grads
