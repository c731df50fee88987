"""Online variational adaptation with a mean teacher and a mixed source/teacher prior.

Per batch: predict with the mixture of source and teacher predictives, build
confidence-filtered teacher targets from augmentations, take one SGD step on
the student's variational objective, then move the teacher toward the
student by EMA on means and deviations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bnn import VariationalNet, apply_sgd, clone_frozen, forward_mean
from .metrics import RunRecord, brier, error_rate, nll
from .numcore import DomainError, Rng, argmax_rows, entropy_rows, inverse_softplus, log_softmax_rows, logsumexp_rows, softmax_rows
from .objectives import LossBreakdown, student_loss_and_grads
from .stream import AugmentParams, DomainStream, augment

log = logging.getLogger(__name__)

ALPHA_MODES = ("adaptive", "fixed")
ALPHA_NUMERATORS = ("teacher_entropy", "source_entropy")
MAX_CONSECUTIVE_SKIPS = 5


@dataclass
class AdaptConfig:
    lambda_ce: float = 1.0
    tau: float = 1.0
    epsilon_margin: float = 1e-2
    beta_ema: float = 0.999
    learning_rate: float = 1e-4
    n_augment: int = 32
    n_mc: int = 1
    kl_scale: float = 1.0 / 50
    use_sce: bool = True
    confidence_fn: str = "max_prob"
    alpha_mode: str = "adaptive"
    alpha_fixed: float = 0.5
    alpha_numerator: str = "teacher_entropy"
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.beta_ema <= 1.0:
            raise ValueError("beta_ema must lie in [0, 1]")
        if self.learning_rate < 0 or self.kl_scale < 0 or self.lambda_ce < 0:
            raise ValueError("learning_rate, kl_scale and lambda_ce must be non-negative")
        if self.n_augment < 1 or self.n_mc < 1:
            raise ValueError("n_augment and n_mc must be >= 1")
        if self.confidence_fn != "max_prob":
            raise ValueError(f"unknown confidence function {self.confidence_fn!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.alpha_numerator not in ALPHA_NUMERATORS:
            raise ValueError(f"alpha_numerator must be one of {ALPHA_NUMERATORS}")
        if not 0.0 <= self.alpha_fixed <= 1.0:
            raise ValueError("alpha_fixed must lie in [0, 1]")


@dataclass
class EngineState:
    student: VariationalNet
    teacher: VariationalNet
    source: VariationalNet
    step_count: int = 0
    alpha_trace: list[float] = field(default_factory=list)
    skipped_steps: int = 0

    @classmethod
    def from_source(cls, source: VariationalNet) -> "EngineState":
        """Student and teacher both start as copies of the warmed-up source."""
        return cls(clone_frozen(source), clone_frozen(source), clone_frozen(source))


@dataclass
class BatchPrediction:
    mixed_probs: np.ndarray
    source_probs: np.ndarray
    teacher_probs: np.ndarray
    alpha: float
    predicted_labels: np.ndarray


def _confidence(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=1)


def _stacked_mean_forward(net: VariationalNet, augs: list[np.ndarray]) -> np.ndarray:
    """Mean-forward logits for all augmentations in one pass, shape (k, n, C)."""
    k, n = len(augs), augs[0].shape[0]
    return forward_mean(net, np.concatenate(augs, axis=0)).reshape(k, n, -1)


def _batch_entropies(logits: np.ndarray) -> np.ndarray:
    """Mean predictive entropy over the batch, per augmentation."""
    k, n, c = logits.shape
    return entropy_rows(softmax_rows(logits.reshape(k * n, c))).reshape(k, n).mean(axis=1)


def alpha_from_entropies(h_source, h_teacher, tau: float, numerator: str = "teacher_entropy") -> float:
    """Average over augmentations of a two-way softmax of entropies / tau."""
    h_source = np.asarray(h_source, dtype=np.float64)
    h_teacher = np.asarray(h_teacher, dtype=np.float64)
    top = h_teacher if numerator == "teacher_entropy" else h_source
    log_w = top / tau - np.logaddexp(h_source / tau, h_teacher / tau)
    return float(np.mean(np.exp(log_w)))


def compute_alpha(source: VariationalNet, teacher: VariationalNet, batch: np.ndarray,
                  augs: list[np.ndarray], tau: float, numerator: str = "teacher_entropy",
                  teacher_aug_logits: np.ndarray | None = None) -> float:
    """Weight of the source prior: grows with the teacher's predictive entropy
    relative to the source's, measured on augmented copies of the batch."""
    if not augs:
        raise DomainError("at least one augmentation is required")
    if tau <= 0:
        raise DomainError("tau must be positive")
    if teacher_aug_logits is None:
        teacher_aug_logits = _stacked_mean_forward(teacher, augs)
    h_src = _batch_entropies(_stacked_mean_forward(source, augs))
    h_tea = _batch_entropies(teacher_aug_logits)
    return alpha_from_entropies(h_src, h_tea, tau, numerator)


def filter_teacher_logprobs(teacher: VariationalNet, batch: np.ndarray, augs: list[np.ndarray],
                            epsilon: float, confidence_fn: str = "max_prob",
                            aug_logits: np.ndarray | None = None) -> np.ndarray:
    """Per sample, the average teacher log-probabilities over augmentations whose
    confidence beats the raw sample's by more than ``epsilon``, renormalized.
    Samples with no qualifying augmentation keep the raw teacher output.
    ``epsilon == -1`` disables the filter (all augmentations are averaged)."""
    if not augs:
        raise DomainError("at least one augmentation is required")
    if confidence_fn != "max_prob":
        raise DomainError(f"unknown confidence function {confidence_fn!r}")
    raw = log_softmax_rows(forward_mean(teacher, batch))
    if aug_logits is None:
        aug_logits = _stacked_mean_forward(teacher, augs)
    k, n, c = aug_logits.shape
    aug_lp = log_softmax_rows(aug_logits.reshape(k * n, c)).reshape(k, n, c)
    if epsilon == -1:
        keep = np.ones((k, n), dtype=bool)
    else:
        conf_raw = _confidence(np.exp(raw))
        conf_aug = np.exp(aug_lp).max(axis=2)
        keep = conf_aug > conf_raw[None, :] + epsilon
    count = keep.sum(axis=0)
    summed = (aug_lp * keep[:, :, None]).sum(axis=0)
    avg = summed / np.maximum(count, 1)[:, None]
    avg = avg - logsumexp_rows(avg)[:, None]
    return np.where(count[:, None] > 0, avg, raw)


def _current_alpha(state, batch, augs, cfg, teacher_aug_logits=None) -> float:
    if cfg.alpha_mode == "fixed":
        return float(cfg.alpha_fixed)
    return compute_alpha(state.source, state.teacher, batch, augs, cfg.tau, cfg.alpha_numerator,
                         teacher_aug_logits)


def _predict_with(state: EngineState, batch: np.ndarray, alpha: float) -> BatchPrediction:
    src = softmax_rows(forward_mean(state.source, batch))
    tea = softmax_rows(forward_mean(state.teacher, batch))
    mixed = alpha * src + (1.0 - alpha) * tea
    return BatchPrediction(mixed, src, tea, alpha, argmax_rows(mixed))


def predict(state: EngineState, batch: np.ndarray, cfg: AdaptConfig, rng: Rng,
            augs: list[np.ndarray] | None = None) -> BatchPrediction:
    """Mixture of source and teacher predictives, weighted by alpha."""
    if augs is None:
        augs = augment(batch, cfg.n_augment, rng, cfg.augment)
    return _predict_with(state, batch, _current_alpha(state, batch, augs, cfg))


def ema_update(teacher: VariationalNet, student: VariationalNet, beta: float) -> None:
    """teacher <- beta * teacher + (1 - beta) * student on means and on deviations."""
    if beta == 1.0:
        return
    for lt, ls in zip(teacher.layers, student.layers):
        for gt, gs in ((lt.weight, ls.weight), (lt.bias, ls.bias)):
            if beta == 0.0:
                gt.mu = gs.mu.copy()
                gt.rho = gs.rho.copy()
                continue
            gt.mu = beta * gt.mu + (1.0 - beta) * gs.mu
            sigma = beta * gt.sigma + (1.0 - beta) * gs.sigma
            gt.rho = inverse_softplus(sigma)


def adapt_step(state: EngineState, batch: np.ndarray, cfg: AdaptConfig, rng: Rng):
    """Predict, then update the student by one SGD step and the teacher by EMA."""
    batch = np.asarray(batch, dtype=np.float64)
    augs = augment(batch, cfg.n_augment, rng, cfg.augment)
    teacher_aug_logits = _stacked_mean_forward(state.teacher, augs)
    alpha = _current_alpha(state, batch, augs, cfg, teacher_aug_logits)
    pred = _predict_with(state, batch, alpha)

    targets = filter_teacher_logprobs(state.teacher, batch, augs, cfg.epsilon_margin, cfg.confidence_fn,
                                      teacher_aug_logits)
    loss = grads = None
    if np.isfinite(alpha):
        loss, grads = student_loss_and_grads(
            state.student, batch, targets, state.source, state.teacher, alpha, cfg, rng
        )
    if loss is not None and np.isfinite(loss.total) and grads.is_finite():
        apply_sgd(state.student, grads, cfg.learning_rate)
        ema_update(state.teacher, state.student, cfg.beta_ema)
        state.skipped_steps = 0
    else:
        state.skipped_steps += 1
        log.warning("non-finite loss at step %d, update skipped", state.step_count)
    state.step_count += 1
    state.alpha_trace.append(alpha)
    return pred, loss


def _score(record: RunRecord, seg: int, op, labels, pred: BatchPrediction, loss: LossBreakdown | None,
           skipped: bool) -> None:
    record.add(
        segment=seg,
        corruption=op.kind,
        severity=op.severity,
        n=len(labels),
        error=error_rate(pred.predicted_labels, labels),
        nll=nll(pred.mixed_probs, labels),
        brier=brier(pred.mixed_probs, labels),
        source_error=error_rate(argmax_rows(pred.source_probs), labels),
        teacher_error=error_rate(argmax_rows(pred.teacher_probs), labels),
        alpha=pred.alpha,
        loss_total=loss.total if loss else float("nan"),
        loss_ce=loss.ce_term if loss else float("nan"),
        loss_kl_source=loss.kl_source_term if loss else float("nan"),
        loss_kl_teacher=loss.kl_teacher_term if loss else float("nan"),
        skipped=int(skipped),
    )


class AdaptationDiverged(RuntimeError):
    def __init__(self, record: RunRecord):
        super().__init__(f"more than {MAX_CONSECUTIVE_SKIPS} consecutive non-finite losses")
        self.record = record


def run_stream(state: EngineState, stream: DomainStream, cfg: AdaptConfig, rng: Rng) -> RunRecord:
    """Adapt over every batch in order. The engine sees only feature batches;
    labels are used after the fact to score the logged predictions."""
    record = RunRecord()
    for seg, op, xb, yb in stream.labeled():
        pred, loss = adapt_step(state, xb, cfg, rng)
        _score(record, seg, op, yb, pred, loss, state.skipped_steps > 0)
        if state.skipped_steps > MAX_CONSECUTIVE_SKIPS:
            record.events.append(f"aborted at batch {len(record) - 1}: repeated non-finite losses")
            raise AdaptationDiverged(record)
    return record
