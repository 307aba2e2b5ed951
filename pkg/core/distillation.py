"""
Teacher-to-student distillation objectives
Logit methods (KD, DKD), feature methods (FitNets, ReviewKD), the KD-token
methods (DeiT, KDP) and the combined student loss
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from core.autodiff import (
    Tensor,
    add,
    concat,
    cross_entropy,
    index_select,
    kl_divergence,
    log_softmax,
    logsumexp,
    matmul,
    mse,
    no_tape,
    sigmoid,
    softmax_with_temperature,
    take_along,
)
from core.errors import ConfigurationError, ContractViolation
from core.prompt_pool import pool_loss
from core.vit import classify

logger = logging.getLogger(__name__)

METHODS = ("none", "kd", "dkd", "fitnets", "reviewkd", "deit", "kdp")
LOGIT_METHODS = ("kd", "dkd")
FEATURE_METHODS = ("fitnets", "reviewkd")
TOKEN_METHODS = ("deit", "kdp")
CLASS_SCOPES = ("current", "seen")
PLACEMENTS = ("global", "pool")


@dataclass(frozen=True)
class DistillConfig:
    method: str = "none"
    alpha: float = 0.5
    lam: float = 1.0
    tau: float = 2.0
    kd_prompt_length: int = 6
    kd_prompt_depth: int = None     # None covers every block
    class_scope: str = "current"
    kd_classifier: bool = True
    kd_prompt_placement: str = "global"

    def validate(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown distillation method '{self.method}', expected one of {METHODS}")
        if not self.tau > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.kd_prompt_length < 0 or self.kd_prompt_length % 2:
            raise ConfigurationError(f"KD prompt length must be even and >= 0, got {self.kd_prompt_length}")
        if self.kd_prompt_depth is not None and self.kd_prompt_depth < 0:
            raise ConfigurationError(f"KD prompt depth must be >= 0, got {self.kd_prompt_depth}")
        if self.class_scope not in CLASS_SCOPES:
            raise ConfigurationError(f"class scope must be one of {CLASS_SCOPES}, got '{self.class_scope}'")
        if self.kd_prompt_placement not in PLACEMENTS:
            raise ConfigurationError(f"KD prompt placement must be one of {PLACEMENTS}")
        return self

    @property
    def needs_teacher(self):
        return self.method != "none"

    @property
    def uses_kd_token(self):
        return self.method == "deit" or (self.method == "kdp" and self.kd_classifier)

    @property
    def uses_kd_prompts(self):
        return self.method == "kdp" and self.kd_prompt_placement == "global"

    @property
    def extra_pool_length(self):
        """CL prompt widening for the insertion-position ablation"""
        if self.method == "kdp" and self.kd_prompt_placement == "pool":
            return self.kd_prompt_length
        return 0

    def kd_depth(self, blocks):
        if not self.uses_kd_prompts or self.kd_prompt_length == 0:
            return 0
        depth = blocks if self.kd_prompt_depth is None else self.kd_prompt_depth
        return min(depth, blocks)

    def to_dict(self):
        return {
            "method": self.method,
            "alpha": self.alpha,
            "lam": self.lam,
            "tau": self.tau,
            "kd_prompt_length": self.kd_prompt_length,
            "kd_prompt_depth": self.kd_prompt_depth,
            "class_scope": self.class_scope,
            "kd_classifier": self.kd_classifier,
            "kd_prompt_placement": self.kd_prompt_placement,
        }


@dataclass
class FeatureMapping:
    """F_M: student feature dim -> teacher feature dim, plus ReviewKD's fusion gate"""

    weight: Tensor
    bias: Tensor
    gate: Tensor = None

    @classmethod
    def initialize(cls, student_dim, teacher_dim, rng, name, with_gate=False):
        weight = Tensor(rng.normal((student_dim, teacher_dim), 1.0 / math.sqrt(student_dim)),
                        requires_grad=True, name=f"{name}/w")
        bias = Tensor(np.zeros(teacher_dim), requires_grad=True, name=f"{name}/b")
        gate = Tensor(np.zeros(()), requires_grad=True, name=f"{name}/gate") if with_gate else None
        return cls(weight, bias, gate)

    @classmethod
    def identity(cls, dim):
        return cls(Tensor(np.eye(dim)), Tensor(np.zeros(dim)))

    def __call__(self, features):
        return add(matmul(features, self.weight), self.bias)

    @property
    def out_dim(self):
        return self.weight.shape[1]


def block_correspondence(j, student_blocks, teacher_blocks):
    """Teacher block for student block ``j`` (1-based): round(j * n_T / n_S), halves up"""
    mapped = int(math.floor(j * teacher_blocks / student_blocks + 0.5))
    return min(max(mapped, 1), teacher_blocks)


# ---------------------------------------------------------------- logit losses

def kd_loss(student_logits, teacher_logits, tau):
    """tau^2 * KL(p^T || p^S) with temperature-softened distributions, batch mean"""
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    student_logits = _as_rows(student_logits)
    teacher_logits = _as_rows(teacher_logits)
    if student_logits.shape[-1] != teacher_logits.shape[-1]:
        raise ContractViolation(
            f"teacher and student disagree on class count: {teacher_logits.shape[-1]} vs {student_logits.shape[-1]}"
        )
    p_teacher = softmax_with_temperature(teacher_logits.detach(), tau)
    log_p_student = log_softmax(student_logits * (1.0 / tau), axis=-1)
    return kl_divergence(p_teacher, log_p_student).mean() * (tau * tau)


def _as_rows(x):
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    return x.reshape(1, x.shape[0]) if x.ndim == 1 else x


def _binary_log_probs(scaled, target, non_target):
    """log [p_t, p_not_t] from temperature-scaled logits"""
    z_t = take_along(scaled, target[:, None])
    z_rest = logsumexp(take_along(scaled, non_target), axis=-1, keepdims=True)
    return log_softmax(concat([z_t, z_rest], axis=-1), axis=-1)


def dkd_loss(student_logits, teacher_logits, target, tau):
    """Decoupled KD: (TCKD, NCKD), each averaged over the batch

    TCKD is the binary KL over [p_t, p_not_t]; NCKD is p_not_t^T times the
    KL between the renormalized non-target distributions. Their sum equals
    the un-scaled KL(p^T || p^S).
    """
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    zs, zt = _as_rows(student_logits), _as_rows(teacher_logits)
    classes = zs.shape[-1]
    if classes < 2:
        raise ContractViolation("decoupled KD needs at least two classes")
    if zt.shape != zs.shape:
        raise ContractViolation(f"logit shapes differ: {zt.shape} vs {zs.shape}")
    target = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if target.shape != (zs.shape[0],) or (target < 0).any() or (target >= classes).any():
        raise ContractViolation(f"target indices {target.tolist()} invalid for {classes} classes")

    rows = zs.shape[0]
    others = np.arange(classes)[None, :].repeat(rows, axis=0)
    non_target = others[others != target[:, None]].reshape(rows, classes - 1)

    # teacher side is a constant
    with no_tape():
        t_binary = np.exp(_binary_log_probs(zt.detach() * (1.0 / tau), target, non_target).data)
        t_hat = softmax_with_temperature(np.take_along_axis(zt.data, non_target, axis=-1), tau).data

    s_scaled = zs * (1.0 / tau)
    tckd = kl_divergence(t_binary, _binary_log_probs(s_scaled, target, non_target)).mean()
    s_hat_log = log_softmax(take_along(s_scaled, non_target), axis=-1)
    nckd = (kl_divergence(t_hat, s_hat_log) * t_binary[:, 1]).mean()
    return tckd, nckd


# ---------------------------------------------------------------- feature losses

def fitnets_loss(student_feature, teacher_feature, mapping):
    """Hint loss: MSE between the teacher's last-block tokens and F_M(student tokens)"""
    if student_feature.shape[:-1] != teacher_feature.shape[:-1]:
        raise ConfigurationError(
            f"teacher/student token grids differ: {teacher_feature.shape[:-1]} vs {student_feature.shape[:-1]}"
        )
    if mapping.out_dim != teacher_feature.shape[-1]:
        raise ContractViolation(f"mapping outputs {mapping.out_dim} dims, teacher features have {teacher_feature.shape[-1]}")
    return mse(mapping(student_feature), _constant(teacher_feature))


def _constant(x):
    return x.detach() if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def reviewkd_loss(student_features, teacher_features, mappings, gates, correspondence=None):
    """Review distillation over fused student features

    G_n = F_n and G_j = s_j * F_j + (1 - s_j) * G_{j+1} with s_j = sigmoid(w_j);
    the loss sums mse(F_M_j(G_j), F^T_map(j)) over all student blocks.
    """
    n = len(student_features)
    if n < 1:
        raise ContractViolation("review distillation needs at least one student block")
    if len(mappings) != n:
        raise ContractViolation(f"{len(mappings)} mappings for {n} student blocks")
    if len(gates) < n - 1:
        raise ContractViolation(f"{len(gates)} fusion gates for {n} student blocks")
    n_teacher = len(teacher_features)
    correspondence = correspondence or (lambda j: block_correspondence(j, n, n_teacher))

    fused = student_features[n - 1]
    total = _review_term(fused, teacher_features[correspondence(n) - 1], mappings[n - 1])
    for j in range(n - 1, 0, -1):
        gate = gates[j - 1]
        s = sigmoid(gate if isinstance(gate, Tensor) else Tensor._wrap(np.asarray(gate, dtype=np.float64)))
        fused = s * student_features[j - 1] + (1.0 - s) * fused
        total = total + _review_term(fused, teacher_features[correspondence(j) - 1], mappings[j - 1])
    return total


def _review_term(fused, teacher_feature, mapping):
    if fused.shape[:-1] != teacher_feature.shape[:-1]:
        raise ConfigurationError(
            f"teacher/student token grids differ: {teacher_feature.shape[:-1]} vs {fused.shape[:-1]}"
        )
    return mse(mapping(fused), _constant(teacher_feature))


# ---------------------------------------------------------------- prediction

def combine_heads_predict(class_logits, kd_logits):
    """Average the two heads' softmax distributions; argmax ties go to the lowest class"""
    a = np.asarray(class_logits.data if isinstance(class_logits, Tensor) else class_logits, dtype=np.float64)
    b = np.asarray(kd_logits.data if isinstance(kd_logits, Tensor) else kd_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"head outputs differ in shape: {a.shape} vs {b.shape}")
    with no_tape():
        dist = 0.5 * (softmax_with_temperature(a, 1.0).data + softmax_with_temperature(b, 1.0).data)
    return dist, np.argmax(dist, axis=-1)


# ---------------------------------------------------------------- teacher

class TeacherSnapshot:
    """Frozen teacher plus a per-sample cache of its logits and block features"""

    def __init__(self, learner):
        self.learner = learner
        self.checksum = learner.checksum()
        self._logits = {}
        self._features = {}

    @classmethod
    def capture(cls, learner):
        return cls(learner.frozen_copy())

    def verify(self):
        current = self.learner.checksum()
        if current != self.checksum:
            raise ContractViolation("teacher snapshot changed during student training")
        return current

    def infer(self, images, task_id, sample_ids=None, collect_features=False):
        """Teacher logits [B, C] (and per-block token features) as constants"""
        keys = None if sample_ids is None else [(task_id, int(i)) for i in sample_ids]
        missing = list(range(len(images))) if keys is None else [
            i for i, key in enumerate(keys)
            if key not in self._logits or (collect_features and key not in self._features)
        ]
        if missing:
            subset = np.asarray(images)[missing]
            with no_tape():
                queries = self.learner.queries(subset)
                selection = self.learner.select(queries, task_id, train=True)
                out = self.learner.vit.forward_features(subset, prefix=self.learner.prefix(selection),
                                                        collect_features=collect_features)
                logits = classify(out.cls_embedding, self.learner.head).data
            if keys is None:
                feats = [f.data for f in out.features] if collect_features else None
                return logits, feats
            for row, i in enumerate(missing):
                self._logits[keys[i]] = logits[row]
                if collect_features:
                    self._features[keys[i]] = [f.data[row] for f in out.features]
        logits = np.stack([self._logits[k] for k in keys])
        feats = None
        if collect_features:
            blocks = len(self._features[keys[0]])
            feats = [np.stack([self._features[k][j] for k in keys]) for j in range(blocks)]
        return logits, feats


# ---------------------------------------------------------------- student objective

@dataclass
class LossBreakdown:
    total: float
    ce: float
    distill: float = 0.0
    pool: float = 0.0
    parts: dict = field(default_factory=dict)


def _scoped(logits, scope):
    return index_select(logits, np.asarray(scope, dtype=np.intp), axis=-1)


def student_loss(learner, images, labels, queries, task_id, distill, task_classes,
                 seen_classes=None, teacher=None, sample_ids=None):
    """Per-batch training objective of ``learner`` under ``distill``

    Logit and token methods: (1 - a) CE + a L_distill + L_pool.
    Feature methods: CE + a L_distill + L_pool. With method "none" the
    distillation branch is absent. L_pool already carries lambda.
    """
    method = distill.method
    if distill.needs_teacher and teacher is None:
        raise ContractViolation(f"method '{method}' needs a teacher snapshot")
    labels = np.asarray(labels, dtype=np.intp)
    scope = list(task_classes) if distill.class_scope == "current" or seen_classes is None else list(seen_classes)
    alpha = distill.alpha

    selection = learner.select(queries, task_id, train=True)
    out = learner.vit.forward_features(
        images,
        prefix=learner.prefix(selection),
        use_kd_token=distill.uses_kd_token,
        kd_token=learner.kd_token,
        collect_features=method in FEATURE_METHODS,
    )
    ce = cross_entropy(classify(out.cls_embedding, learner.head, mask=task_classes), labels)
    lpool = pool_loss(learner.pool.method, queries, selection, learner.pool, distill.lam)

    if method == "none":
        total = ce + lpool
        return total, LossBreakdown(total.item(), ce.item(), 0.0, lpool.item())

    teacher_logits, teacher_feats = teacher.infer(images, task_id, sample_ids,
                                                  collect_features=method in FEATURE_METHODS)
    teacher_scoped = teacher_logits[:, scope]
    parts = {}
    if method == "kd":
        lkd = kd_loss(_scoped(classify(out.cls_embedding, learner.head), scope), teacher_scoped, distill.tau)
    elif method == "dkd":
        position = {c: i for i, c in enumerate(scope)}
        if any(int(y) not in position for y in labels):
            raise ContractViolation("DKD target outside the distillation class scope")
        tckd, nckd = dkd_loss(_scoped(classify(out.cls_embedding, learner.head), scope), teacher_scoped,
                              [position[int(y)] for y in labels], distill.tau)
        parts = {"tckd": tckd.item(), "nckd": nckd.item()}
        lkd = tckd + nckd
    elif method == "fitnets":
        last = learner.vit.config.blocks
        lkd = fitnets_loss(out.features[-1], teacher_feats[-1], learner.mappings[last])
    elif method == "reviewkd":
        blocks = learner.vit.config.blocks
        lkd = reviewkd_loss(out.features, teacher_feats, [learner.mappings[j] for j in range(1, blocks + 1)],
                            learner.gates)
    else:
        embedding, head = (out.kd_embedding, learner.kd_head) if distill.uses_kd_token else (out.cls_embedding, learner.head)
        lkd = kd_loss(_scoped(classify(embedding, head), scope), teacher_scoped, distill.tau)

    if method in FEATURE_METHODS:
        total = ce + lkd * alpha + lpool
    else:
        total = ce * (1.0 - alpha) + lkd * alpha + lpool
    return total, LossBreakdown(total.item(), ce.item(), lkd.item(), lpool.item(), parts)
