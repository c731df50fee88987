"""Loss terms with analytic gradients w.r.t. logits, and the full student objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bnn import ForwardCache, GradientSet, VariationalNet, backward, draw_noise, forward, kl_between, kl_gradients
from .numcore import DomainError, Rng, ShapeError, log_softmax_rows, logsumexp_rows

TEACHER_LOG_FLOOR = float(np.log(1e-12))


@dataclass
class LossBreakdown:
    total: float
    ce_term: float
    kl_source_term: float
    kl_teacher_term: float
    alpha_used: float


def _check_pair(student_logits, teacher_log_probs):
    if student_logits.shape != teacher_log_probs.shape:
        raise ShapeError(
            f"student {student_logits.shape} and teacher {teacher_log_probs.shape} differ"
        )
    if np.any(np.abs(logsumexp_rows(teacher_log_probs)) > 1e-9):
        raise DomainError("teacher log-probabilities are not normalized")


def ce_to_teacher(student_logits, teacher_log_probs, with_grad=False):
    """Mean over the batch of -sum_c pbar_c log q_c."""
    _check_pair(student_logits, teacher_log_probs)
    n = student_logits.shape[0]
    logq = log_softmax_rows(student_logits)
    pbar = np.exp(teacher_log_probs)
    loss = float(-(pbar * logq).sum() / n)
    if not with_grad:
        return loss
    # pbar rows sum to 1, so d/dz = q - pbar
    return loss, (np.exp(logq) - pbar) / n


def sce_to_teacher(student_logits, teacher_log_probs, with_grad=False):
    """Symmetric cross-entropy: CE(pbar, q) + CE(q, pbar), batch mean.

    The teacher log-probabilities in the reverse term are floored at log(1e-12).
    """
    _check_pair(student_logits, teacher_log_probs)
    n = student_logits.shape[0]
    logq = log_softmax_rows(student_logits)
    q = np.exp(logq)
    pbar = np.exp(teacher_log_probs)
    logp_floor = np.maximum(teacher_log_probs, TEACHER_LOG_FLOOR)
    forward_ce = -(pbar * logq).sum()
    reverse_ce = -(q * logp_floor).sum()
    loss = float((forward_ce + reverse_ce) / n)
    if not with_grad:
        return loss
    # d/dz_j of -sum_c q_c a_c = -q_j (a_j - sum_c q_c a_c)
    expected = (q * logp_floor).sum(axis=1, keepdims=True)
    d_rev = -q * (logp_floor - expected)
    return loss, ((q - pbar) + d_rev) / n


def nll_supervised(logits, labels, with_grad=False):
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DomainError("label out of range")
    logq = log_softmax_rows(logits)
    loss = float(-logq[np.arange(n), labels].mean())
    if not with_grad:
        return loss
    d = np.exp(logq)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def mean_entropy(logits, with_grad=False):
    """Mean predictive entropy of softmax(logits), used by the entropy-minimization baseline."""
    n = logits.shape[0]
    logq = log_softmax_rows(logits)
    q = np.exp(logq)
    h = -(q * logq).sum(axis=1)
    loss = float(h.mean())
    if not with_grad:
        return loss
    return loss, -q * (logq + h[:, None]) / n


def student_loss_and_grads(
    student: VariationalNet,
    batch: np.ndarray,
    teacher_log_probs: np.ndarray,
    source: VariationalNet,
    teacher_net: VariationalNet,
    alpha: float,
    cfg,
    rng: Rng | None = None,
    noise=None,
):
    """Student objective: lambda * CE-or-SCE(student sample, filtered teacher)
    + kl_scale * [alpha KL(q||source) + (1-alpha) KL(q||teacher)].

    ``noise`` fixes the reparameterization draws; otherwise ``cfg.n_mc`` draws
    are taken from ``rng`` and the data term is averaged over them.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    student.check_compatible(source)
    student.check_compatible(teacher_net)
    data_fn = sce_to_teacher if cfg.use_sce else ce_to_teacher
    if noise is None:
        noise = [draw_noise(student, batch.shape[0], rng) for _ in range(cfg.n_mc)]
    elif not isinstance(noise[0], list):
        noise = [noise]

    grads = GradientSet.zeros_like(student)
    data_term = 0.0
    for eps in noise:
        cache = ForwardCache()
        logits = forward(student, batch, eps, cache)
        value, dlogits = data_fn(logits, teacher_log_probs, with_grad=True)
        data_term += value / len(noise)
        grads = grads + backward(student, cache, dlogits).scaled(cfg.lambda_ce / len(noise))
    ce_term = cfg.lambda_ce * data_term

    kl_src = cfg.kl_scale * kl_between(student, source)
    kl_tea = cfg.kl_scale * kl_between(student, teacher_net)
    if alpha > 0.0:
        grads = grads + kl_gradients(student, source).scaled(cfg.kl_scale * alpha)
    if alpha < 1.0:
        grads = grads + kl_gradients(student, teacher_net).scaled(cfg.kl_scale * (1.0 - alpha))
    total = ce_term + alpha * kl_src + (1.0 - alpha) * kl_tea
    return LossBreakdown(total, ce_term, kl_src, kl_tea, alpha), grads
