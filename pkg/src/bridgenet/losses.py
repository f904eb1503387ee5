"""Fused per-pixel losses for the four task kinds.

All losses average over valid pixels and raise on an empty mask.
"""

from __future__ import annotations

import numpy as np

from .tensor import Function, ShapeError, Tensor

IGNORE_INDEX = 255


class EmptyMaskError(ValueError):
    pass


def _check_mask(mask: np.ndarray):
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("loss over an empty mask")
    return n


class CrossEntropy(Function):
    def forward(self, logits, labels=None, ignore_index=IGNORE_INDEX):
        b, k, h, w = logits.shape
        if labels.shape != (b, h, w):
            raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
        valid = labels != ignore_index
        n = _check_mask(valid)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e.sum(axis=1, keepdims=True)
        logp = z - np.log(s)
        safe = np.where(valid, labels, 0).astype(np.int64)
        picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
        self.prob = e / s
        self.safe, self.valid, self.n = safe, valid, n
        return np.asarray(-(picked * valid).sum() / n, dtype=logits.dtype)

    def backward(self, g):
        grad = self.prob.copy()
        np.put_along_axis(grad, self.safe[:, None], np.take_along_axis(grad, self.safe[:, None], axis=1) - 1.0, axis=1)
        grad *= self.valid[:, None]
        return grad * (g / self.n)


class MaskedL1(Function):
    def forward(self, pred, target=None, mask=None):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        m = np.broadcast_to(mask, pred.shape)
        n = _check_mask(m)
        diff = pred - target
        self.sign = np.sign(diff) * m
        self.n = n
        return np.asarray((np.abs(diff) * m).sum() / n, dtype=pred.dtype)

    def backward(self, g):
        return self.sign * (g / self.n)


class CosineLoss(Function):
    """Mean of ``1 - cos(pred, target)`` over valid pixels; vectors along axis 1."""

    def forward(self, pred, target=None, mask=None, eps=1e-8):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        n = _check_mask(mask)
        norm = np.sqrt((pred * pred).sum(axis=1, keepdims=True) + eps)
        unit = pred / norm
        cos = (unit * target).sum(axis=1)
        self.unit, self.norm, self.target, self.mask, self.n = unit, norm, target, mask, n
        return np.asarray(((1.0 - cos) * mask).sum() / n, dtype=pred.dtype)

    def backward(self, g):
        u, t = self.unit, self.target
        proj = (u * t).sum(axis=1, keepdims=True)
        dcos = (t - u * proj) / self.norm
        return -dcos * self.mask[:, None] * (g / self.n)


class WeightedBCE(Function):
    """Class-balanced binary cross-entropy on logits.

    Positives are weighted by the negative fraction and vice versa.
    """

    def forward(self, logits, target=None, mask=None):
        if logits.shape != target.shape:
            raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
        m = np.broadcast_to(mask, logits.shape).astype(logits.dtype)
        n = _check_mask(m)
        t = target.astype(logits.dtype)
        npos = float((t * m).sum())
        nneg = n - npos
        wpos, wneg = nneg / n, npos / n
        if npos == 0 or nneg == 0:
            wpos = wneg = 1.0
        w = (wpos * t + wneg * (1.0 - t)) * m
        # log(1 + exp(-|x|)) form for stability
        loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
        self.sig = 1.0 / (1.0 + np.exp(-logits))
        self.w, self.t, self.n = w, t, n
        return np.asarray((w * loss).sum() / n, dtype=logits.dtype)

    def backward(self, g):
        return self.w * (self.sig - self.t) * (g / self.n)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return CrossEntropy.apply(logits, labels=np.asarray(labels), ignore_index=ignore_index)


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    return MaskedL1.apply(pred, target=np.asarray(target, dtype=pred.dtype), mask=np.asarray(mask, dtype=bool))


def cosine_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    return CosineLoss.apply(pred, target=np.asarray(target, dtype=pred.dtype), mask=np.asarray(mask, dtype=bool))


def weighted_bce(logits: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    return WeightedBCE.apply(logits, target=np.asarray(target), mask=np.asarray(mask, dtype=bool))
