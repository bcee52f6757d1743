"""Differentiable composites of the tape primitives.

Mirrors of the forward-only tensor/attention operations, expressed over
:class:`~hot.autodiff.Var` so the tape provides exact adjoints.  These carry a
leading batch axis where noted; the feature-map projection matrix is treated
as a constant (no gradient flows into the random draw).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .attention import EPS_Z
from .autodiff import Var, axis_letters
from .features import FeatureMapSpec, projection_matrix


def matricize_v(t: Var, mode: int) -> Var:
    perm = (mode,) + tuple(i for i in range(t.value.ndim) if i != mode)
    moved = ad.transpose(t, perm)
    return ad.reshape(moved, (t.shape[mode], t.value.size // t.shape[mode]))


def fold_v(m: Var, mode: int, shape) -> Var:
    shape = tuple(shape)
    rest = tuple(d for i, d in enumerate(shape) if i != mode)
    cube = ad.reshape(m, (shape[mode],) + rest)
    perm = list(range(1, len(shape)))
    perm.insert(mode, 0)
    return ad.transpose(cube, perm)


def mode_product_v(t: Var, a: Var, mode: int) -> Var:
    """Contract matrix ``a`` (d, N) against axis ``mode`` of ``t``."""
    letters = axis_letters(t.value.ndim)
    out = letters[:mode] + "y" + letters[mode + 1:]
    return ad.einsum(f"y{letters[mode]},{letters}->{out}", a, t)


def _move_axis_to_rows(t: Var, axis: int, lead: int = 1) -> tuple[Var, tuple, tuple]:
    """Reshape (*lead, ..., N at axis, ...) to (*lead, N, rest); returns restore info."""
    nd = t.value.ndim
    perm = tuple(range(lead)) + (axis,) + tuple(i for i in range(lead, nd) if i != axis)
    moved = ad.transpose(t, perm)
    mid_shape = moved.shape
    flat = ad.reshape(moved, mid_shape[:lead + 1] + (-1,))
    return flat, mid_shape, perm


def _restore_rows(flat: Var, mid_shape: tuple, perm: tuple, new_rows: int, lead: int = 1) -> Var:
    cube = ad.reshape(flat, mid_shape[:lead] + (new_rows,) + mid_shape[lead + 1:])
    inverse = tuple(int(i) for i in np.argsort(perm))
    return ad.transpose(cube, inverse)


def batched_mode_apply_v(t: Var, s: Var, axis: int, lead: int = 1) -> Var:
    """Apply per-batch matrices ``s`` (*lead, d, N) along ``axis`` of ``t`` (*lead, ...)."""
    if axis < lead:
        raise ValueError("axis lies in the leading batch axes")
    flat, mid_shape, perm = _move_axis_to_rows(t, axis, lead)
    out = ad.matmul(s, flat)
    return _restore_rows(out, mid_shape, perm, s.shape[-2], lead)


def sum_except_v(t: Var, keep_axes) -> Var:
    """Sum out every axis not listed; kept axes stay in their original order."""
    keep = sorted(ax % t.value.ndim for ax in keep_axes)
    drop = tuple(ax for ax in range(t.value.ndim) if ax not in keep)
    return ad.sum_axes(t, drop) if drop else t


def softmax_rows_v(m: Var) -> Var:
    return ad.softmax_last(m)


def affine_v(x: Var, w: Var, b: Var | None = None) -> Var:
    """Affine map along the hidden (last) axis: x @ w + b."""
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def layer_norm_v(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Layer normalization along the last axis with learned scale and shift."""
    n = x.shape[-1]
    mean = ad.scale(ad.sum_axes(x, -1, keepdims=True), 1.0 / n)
    centered = ad.sub(x, mean)
    var = ad.scale(ad.sum_axes(ad.mul(centered, centered), -1, keepdims=True), 1.0 / n)
    rstd = ad.power(ad.shift(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(centered, rstd), gamma), beta)


def gelu_v(x: Var) -> Var:
    return ad.gelu(x)


def feature_map_v(x: Var, spec: FeatureMapSpec, omega: np.ndarray | None = None) -> Var:
    """Positive random features along the last axis; ``omega`` is a constant."""
    if omega is None:
        omega = projection_matrix(spec)
    proj = ad.matmul(x, ad.constant(omega), tb=True)
    sq = ad.scale(ad.sum_axes(ad.mul(x, x), -1, keepdims=True), 0.5)
    return ad.scale(ad.exp(ad.sub(proj, sq)), 1.0 / math.sqrt(spec.num_features))


def kernelized_mode_apply_v(v: Var, qt: Var, kt: Var, axis: int, spec: FeatureMapSpec,
                            omega: np.ndarray | None = None, lead: int = 1) -> Var:
    """Batched differentiable kernelized attention along one mode.

    ``v`` is (*lead, ..., N, ..., E) with ``N`` at ``axis``; ``qt``/``kt`` are
    the pooled per-mode matrices (*lead, N, E).  Key-side contraction first,
    Z floored at the same epsilon as the forward-only path.
    """
    if omega is None:
        omega = projection_matrix(spec)
    scale = qt.shape[-1] ** -0.25
    qp = feature_map_v(ad.scale(qt, scale), spec, omega)  # (*lead, N, M)
    kp = feature_map_v(ad.scale(kt, scale), spec, omega)
    flat, mid_shape, perm = _move_axis_to_rows(v, axis, lead)
    keyed = ad.matmul(kp, flat, ta=True)  # (*lead, M, rest)
    queried = ad.matmul(qp, keyed)  # (*lead, N, rest)
    m = qp.shape[-1]
    batch_shape = qp.shape[:-2]
    n = qp.shape[-2]
    z = ad.reshape(ad.matmul(qp, ad.reshape(ad.sum_axes(kp, len(batch_shape)),
                                            batch_shape + (m, 1))),
                   batch_shape + (n,))
    z = ad.clip_min(z, EPS_Z)
    zinv = ad.reshape(ad.power(z, -1.0), batch_shape + (n, 1))
    out = ad.mul(queried, zinv)
    return _restore_rows(out, mid_shape, perm, v.shape[axis], lead)


def mse_v(pred: Var, target: np.ndarray) -> Var:
    diff = ad.sub(pred, ad.constant(target))
    return ad.mean_all(ad.mul(diff, diff))


def cross_entropy_v(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under row logits."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = ad.log_softmax_last(logits)
    return ad.scale(ad.sum_axes(ad.mul(logp, ad.constant(onehot))), -1.0 / n)
