"""Loss functions of the two-stream model.

All losses are differentiable torch expressions; gradients come from
autograd and are checked against finite differences in the test suite.
Softmax-based losses use ``log_softmax``, which shifts by the row max.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # identity classification
    lambda2: float = 1.0  # triplet
    alpha: float = 0.003  # teacher-student regularization
    beta: float = 0.1  # illumination dis-classification
    margin: float = 0.3
    epsilon: float = 0.1  # label smoothing

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.epsilon >= 1:
            raise ValueError(f"epsilon must be < 1, got {self.epsilon}")

    def to_dict(self) -> dict:
        return asdict(self)


def smoothing_targets(labels: torch.Tensor, n: int, epsilon: float, dtype=torch.float32) -> torch.Tensor:
    """Soft targets: ``1 - (n-1) eps / n`` on the true class and ``eps / n`` elsewhere."""
    p = torch.full((len(labels), n), epsilon / n, dtype=dtype)
    p.scatter_(1, labels.view(-1, 1), 1.0 - (n - 1) * epsilon / n)
    return p


def smoothed_ce(logits: torch.Tensor, labels: torch.Tensor, epsilon: float, n: int) -> torch.Tensor:
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    if logits.dim() != 2 or logits.shape[1] != n:
        raise ValueError(f"expected logits of shape (B, {n}), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    p = smoothing_targets(labels, n, epsilon, logits.dtype)
    return -(p * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def euclidean_dist(v: torch.Tensor) -> torch.Tensor:
    sq = (v.unsqueeze(1) - v.unsqueeze(0)).pow(2).sum(-1)
    # keep the gradient finite for coincident points
    return sq.clamp_min(1e-12).sqrt()


def batch_hard_triplet(v: torch.Tensor, labels: torch.Tensor, margin: float, mode: str = "batch_hard") -> torch.Tensor:
    """Triplet hinge ``[m + D(a,p) - D(a,n)]_+``.

    ``batch_hard`` takes the farthest positive and nearest negative for each
    anchor and averages over anchors. ``all`` averages the hinge over every
    valid (a, p, n) triplet.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if v.dim() != 2 or len(v) != len(labels):
        raise ValueError("embeddings must be (B, D) aligned with labels")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    if not bool(pos.any(1).all()) or not bool(neg.any(1).all()):
        raise ValueError("every anchor needs at least one positive and one negative in the batch")
    dist = euclidean_dist(v)
    if mode == "batch_hard":
        d_ap = dist.masked_fill(~pos, float("-inf")).amax(dim=1)
        d_an = dist.masked_fill(~neg, float("inf")).amin(dim=1)
        return F.relu(margin + d_ap - d_an).mean()
    if mode == "all":
        valid = pos.unsqueeze(2) & neg.unsqueeze(1)
        hinge = F.relu(margin + dist.unsqueeze(2) - dist.unsqueeze(1))
        return hinge[valid].mean()
    raise ValueError(f"unknown triplet mode {mode!r}")


def person_loss(f_r, v_r, labels, w: LossWeights, n_person: int) -> torch.Tensor:
    return (w.lambda1 * smoothed_ce(f_r, labels, w.epsilon, n_person)
            + w.lambda2 * batch_hard_triplet(v_r, labels, w.margin))


def ts_regularization(fmap_student: torch.Tensor, fmap_teacher: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between feature maps, summed per sample and averaged over the batch."""
    if fmap_student.shape != fmap_teacher.shape:
        raise ValueError(f"feature map shapes differ: {tuple(fmap_student.shape)} vs {tuple(fmap_teacher.shape)}")
    return (fmap_student - fmap_teacher).pow(2).sum() / fmap_student.shape[0]


def dis_illumination_loss(f_dis_i: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the illumination prediction against the uniform distribution."""
    if f_dis_i.dim() != 2 or f_dis_i.shape[1] < 2:
        raise ValueError(f"expected (B, N_illu >= 2) logits, got {tuple(f_dis_i.shape)}")
    return -F.log_softmax(f_dis_i, dim=1).mean(dim=1).mean()


def illum_stage_loss(f_i, illum_labels, fmap_s_i, fmap_t_i, w: LossWeights, return_parts: bool = False):
    """Illumination classification plus alpha-weighted teacher regularization.

    ``fmap_t_i=None`` drops the teacher term.
    """
    parts = {"illu_ce": smoothed_ce(f_i, illum_labels, w.epsilon, f_i.shape[1])}
    total = parts["illu_ce"]
    if fmap_t_i is not None:
        parts["ts_illu"] = ts_regularization(fmap_s_i, fmap_t_i)
        total = total + w.alpha * parts["ts_illu"]
    return (total, parts) if return_parts else total


def reid_stage_loss(outputs, labels, fmap_t_r, w: LossWeights, use_dis: bool = True, return_parts: bool = False):
    """beta * dis + lambda1 * smoothed CE + lambda2 * triplet + alpha * teacher term.

    ``outputs`` is a ``ForwardOutputs``; ``fmap_t_r=None`` drops the teacher
    term and ``use_dis=False`` drops the dis-classification term.
    """
    n_person = outputs.f_r.shape[1]
    parts = {
        "id_ce": smoothed_ce(outputs.f_r, labels, w.epsilon, n_person),
        "triplet": batch_hard_triplet(outputs.v_r, labels, w.margin),
    }
    total = w.lambda1 * parts["id_ce"] + w.lambda2 * parts["triplet"]
    if use_dis:
        parts["dis_illu"] = dis_illumination_loss(outputs.f_dis_i)
        total = total + w.beta * parts["dis_illu"]
    if fmap_t_r is not None:
        parts["ts_reid"] = ts_regularization(outputs.fmap_s_r, fmap_t_r)
        total = total + w.alpha * parts["ts_reid"]
    return (total, parts) if return_parts else total


__all__ = [
    "LossWeights",
    "batch_hard_triplet",
    "dis_illumination_loss",
    "euclidean_dist",
    "illum_stage_loss",
    "person_loss",
    "reid_stage_loss",
    "smoothed_ce",
    "smoothing_targets",
    "ts_regularization",
]
