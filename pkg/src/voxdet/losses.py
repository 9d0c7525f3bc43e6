"""Differentiable box-regression loss kernels with analytic gradients.

Losses operate on a center-size parameterization: a pair of 3-vectors
``center = (cz, cy, cx)`` and ``size = (d, h, w)``, flattened to the
6-vector ``(cz, cy, cx, d, h, w)``. Gradients follow that ordering.

Three kernels are provided:

* ``smooth_l1``: elementwise Huber on the six parameter differences.
* ``diou_loss``: 1 - IoU plus squared center distance over the squared
  enclosing-box diagonal. Always in [0, 2).
* ``vciou_loss``: ``diou_loss`` plus ``alpha * v`` where ``v`` is the
  aspect-ratio consistency term over the three orthogonal planes and
  ``alpha = v / (1 - IoU + v)``.

Gradient convention: ``alpha`` is treated as a constant during
differentiation, so no gradient flows through it. The finite-difference
checker freezes ``alpha`` the same way; this matches the usual treatment
of the trade-off weight in complete-IoU-style losses and is the one
convention a caller must know before wiring these kernels into a trainer.
At other min/max switch points the subgradient 0 is taken for the
switching term, and for coincident boxes (the global minimum, itself a
kink) the whole gradient is 0, so an optimizer sitting on the optimum
stays there.

Aggregation over a batch is a mean by default; ``sum`` and ``none`` are
selectable. For ``mean`` the returned per-row gradients are scaled by
``1/N`` so they are the gradients of the reduced value.

Batch and scalar entry points share a single code path, so looping scalar
calls reproduces batched results bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonDifferentiablePoint, NonPositiveSize, ShapeMismatch
from .geometry import Box3, Vec3, _as_vec3

LOSS_KINDS = ("smooth_l1", "diou", "vciou")
REDUCTIONS = ("mean", "sum", "none")

PARAM_ORDER = ("cz", "cy", "cx", "d", "h", "w")


@dataclass(frozen=True)
class BoxParam:
    """Center-size box parameterization, bijective with :class:`Box3`."""

    center: Vec3  # (cz, cy, cx)
    size: Vec3    # (d, h, w), all > 0

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        size = _as_vec3(self.size, "size")
        if any(s <= 0 for s in size):
            raise ValueError(f"size components must be > 0, got {size}")
        object.__setattr__(self, "size", size)

    @classmethod
    def from_box3(cls, box: Box3) -> "BoxParam":
        return cls(box.center, box.extents)

    def to_box3(self) -> Box3:
        return Box3.from_center_size(self.center, self.size)

    def as_row(self) -> np.ndarray:
        return np.array([self.center + self.size], dtype=np.float64)


@dataclass(frozen=True)
class LossValue:
    """A loss value and, unless value-only evaluation was requested, its
    6-vector gradient with respect to the predicted (center, size)."""

    value: float
    gradient: np.ndarray | None = None


@dataclass(frozen=True)
class BatchLoss:
    """Batched loss result.

    ``values`` holds the per-pair losses. ``gradients`` (when requested)
    holds per-row gradients already scaled for the chosen reduction:
    raw per-pair gradients for ``none``/``sum``, divided by N for
    ``mean``. ``reduced`` is None for reduction ``none``.
    """

    kind: str
    values: np.ndarray
    gradients: np.ndarray | None
    reduction: str
    reduced: float | None


def _validate_rows(arr, name: str) -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 6:
        raise ShapeMismatch(f"{name} must be an (N, 6) array, got shape {a.shape}")
    if not np.isfinite(a).all():
        bad = int(np.argwhere(~np.isfinite(a))[0][0])
        raise ValueError(f"{name} contains a non-finite value at row {bad}")
    nonpos = a[:, 3:] <= 0
    if nonpos.any():
        bad = int(np.argwhere(nonpos.any(axis=1))[0][0])
        raise NonPositiveSize(f"{name} row {bad} has a size component <= 0")
    return a


def _split(params: np.ndarray):
    c = params[:, :3]
    s = params[:, 3:]
    return c, s, c - 0.5 * s, c + 0.5 * s


def _partial_products(triple: np.ndarray) -> np.ndarray:
    """For rows (a, b, c) return (b*c, a*c, a*b)."""
    out = np.empty_like(triple)
    out[:, 0] = triple[:, 1] * triple[:, 2]
    out[:, 1] = triple[:, 0] * triple[:, 2]
    out[:, 2] = triple[:, 0] * triple[:, 1]
    return out


def _iou_parts(pred: np.ndarray, gt: np.ndarray, with_grad: bool):
    """IoU plus, when requested, d(IoU)/d(center, size) of the prediction.

    Gradients take the subgradient 0 at clamp and min/max switch points;
    the gradient checker refuses those inputs instead of hiding them.
    """
    pc, ps, pmin, pmax = _split(pred)
    gc, gs, gmin, gmax = _split(gt)

    ov = np.minimum(pmax, gmax) - np.maximum(pmin, gmin)
    ov = np.maximum(ov, 0.0)
    inter = ov[:, 0] * ov[:, 1] * ov[:, 2]
    vp = ps[:, 0] * ps[:, 1] * ps[:, 2]
    vg = gs[:, 0] * gs[:, 1] * gs[:, 2]
    union = vp + vg - inter
    iou = inter / union

    if not with_grad:
        return iou, None, None

    open_ov = ov > 0.0
    hi_from_pred = (pmax < gmax) & open_ov
    lo_from_pred = (pmin > gmin) & open_ov
    a = hi_from_pred.astype(np.float64)
    b = lo_from_pred.astype(np.float64)

    prods = _partial_products(ov)
    d_inter_dc = (a - b) * prods
    d_inter_ds = 0.5 * (a + b) * prods
    d_vp_ds = _partial_products(ps)

    u2 = union * union
    d_iou_dc = (d_inter_dc * union[:, None] + inter[:, None] * d_inter_dc) / u2[:, None]
    # d(union)/dc = -d(inter)/dc, hence the + above after expanding the quotient rule
    d_iou_ds = (
        d_inter_ds * union[:, None]
        - inter[:, None] * (d_vp_ds - d_inter_ds)
    ) / u2[:, None]
    return iou, d_iou_dc, d_iou_ds


def _distance_parts(pred: np.ndarray, gt: np.ndarray, with_grad: bool):
    """Normalized center-distance term rho^2 / c^2 and its gradient."""
    pc, ps, pmin, pmax = _split(pred)
    gc, gs, gmin, gmax = _split(gt)

    diff = pc - gc
    rho2 = (diff * diff).sum(axis=1)
    edge = np.maximum(pmax, gmax) - np.minimum(pmin, gmin)
    diag2 = (edge * edge).sum(axis=1)
    term = rho2 / diag2

    if not with_grad:
        return term, None, None

    c_from_pred = (pmax > gmax).astype(np.float64)
    d_from_pred = (pmin < gmin).astype(np.float64)
    d_diag2_dc = 2.0 * edge * (c_from_pred - d_from_pred)
    d_diag2_ds = edge * (c_from_pred + d_from_pred)

    d4 = (diag2 * diag2)[:, None]
    d_term_dc = (2.0 * diff * diag2[:, None] - rho2[:, None] * d_diag2_dc) / d4
    d_term_ds = -rho2[:, None] * d_diag2_ds / d4
    return term, d_term_dc, d_term_ds


def _aspect_parts(pred_sizes: np.ndarray, gt_sizes: np.ndarray, with_grad: bool):
    """Aspect consistency term v and its gradient w.r.t. predicted sizes.

    Sizes are (d, h, w). The three ratios are w/h, h/d, d/w; their squared
    arctangent differences are summed (not averaged) and scaled by 4/pi^2.
    """
    pd, ph, pw = pred_sizes[:, 0], pred_sizes[:, 1], pred_sizes[:, 2]
    gd, gh, gw = gt_sizes[:, 0], gt_sizes[:, 1], gt_sizes[:, 2]

    q1, q2, q3 = pw / ph, ph / pd, pd / pw
    t1 = np.arctan(gw / gh) - np.arctan(q1)
    t2 = np.arctan(gh / gd) - np.arctan(q2)
    t3 = np.arctan(gd / gw) - np.arctan(q3)
    scale = 4.0 / np.pi**2
    v = scale * (t1 * t1 + t2 * t2 + t3 * t3)

    if not with_grad:
        return v, None

    dv_dq1 = scale * 2.0 * t1 * (-1.0 / (1.0 + q1 * q1))
    dv_dq2 = scale * 2.0 * t2 * (-1.0 / (1.0 + q2 * q2))
    dv_dq3 = scale * 2.0 * t3 * (-1.0 / (1.0 + q3 * q3))

    dv = np.empty_like(pred_sizes)
    dv[:, 0] = dv_dq2 * (-ph / (pd * pd)) + dv_dq3 * (1.0 / pw)   # d
    dv[:, 1] = dv_dq1 * (-pw / (ph * ph)) + dv_dq2 * (1.0 / pd)   # h
    dv[:, 2] = dv_dq1 * (1.0 / ph) + dv_dq3 * (-pd / (pw * pw))   # w
    return v, dv


def _alpha_of(iou: np.ndarray, v: np.ndarray) -> np.ndarray:
    denom = 1.0 - iou + v
    alpha = np.zeros_like(v)
    np.divide(v, denom, out=alpha, where=v > 0.0)
    return alpha


def _smooth_l1_core(pred, gt, beta: float, with_grad: bool):
    x = pred - gt
    absx = np.abs(x)
    quad = absx <= beta
    elems = np.where(quad, x * x / (2.0 * beta), absx - 0.5 * beta)
    values = elems.sum(axis=1)
    if not with_grad:
        return values, None
    grads = np.where(quad, x / beta, np.sign(x))
    return values, grads


def _diou_core(pred, gt, with_grad: bool):
    iou, d_iou_dc, d_iou_ds = _iou_parts(pred, gt, with_grad)
    dist, d_dist_dc, d_dist_ds = _distance_parts(pred, gt, with_grad)
    values = 1.0 - iou + dist
    if not with_grad:
        return values, None
    grads = np.concatenate([d_dist_dc - d_iou_dc, d_dist_ds - d_iou_ds], axis=1)
    # Coincident boxes sit on a kink at the global minimum; 0 is the
    # canonical subgradient there (an optimizer must not be pushed away).
    at_minimum = (iou == 1.0) & (dist == 0.0)
    if at_minimum.any():
        grads[at_minimum] = 0.0
    return values, grads


def _vciou_core(pred, gt, with_grad: bool):
    diou, diou_grads = _diou_core(pred, gt, with_grad)
    v, dv = _aspect_parts(pred[:, 3:], gt[:, 3:], with_grad)
    iou, _, _ = _iou_parts(pred, gt, False)
    alpha = _alpha_of(iou, v)
    values = diou + alpha * v
    if not with_grad:
        return values, None
    grads = diou_grads.copy()
    grads[:, 3:] += alpha[:, None] * dv
    return values, grads


_CORES: dict[str, Callable] = {
    "smooth_l1": _smooth_l1_core,
    "diou": _diou_core,
    "vciou": _vciou_core,
}


def batch_loss(kind: str, pred, gt, *, beta: float = 1.0,
               reduction: str = "mean", with_grad: bool = True) -> BatchLoss:
    """Evaluate a loss kernel over paired (N, 6) parameter arrays."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")
    p = _validate_rows(pred, "pred")
    g = _validate_rows(gt, "gt")
    if p.shape[0] != g.shape[0]:
        raise ShapeMismatch(
            f"pred and gt must pair rows, got {p.shape[0]} vs {g.shape[0]}"
        )
    if kind == "smooth_l1":
        if not beta > 0:
            raise ValueError(f"beta must be > 0, got {beta}")
        values, grads = _smooth_l1_core(p, g, beta, with_grad)
    else:
        values, grads = _CORES[kind](p, g, with_grad)

    n = p.shape[0]
    reduced: float | None
    if reduction == "none" or n == 0:
        reduced = None if reduction == "none" else 0.0
    elif reduction == "sum":
        reduced = float(values.sum())
    else:
        reduced = float(values.mean())
    if grads is not None and reduction == "mean" and n > 0:
        grads = grads / n
    return BatchLoss(kind, values, grads, reduction, reduced)


def _scalar(kind: str, pred: BoxParam, gt: BoxParam, beta: float,
            with_grad: bool) -> LossValue:
    res = batch_loss(kind, pred.as_row(), gt.as_row(), beta=beta,
                     reduction="none", with_grad=with_grad)
    grad = res.gradients[0].copy() if res.gradients is not None else None
    return LossValue(float(res.values[0]), grad)


def smooth_l1(pred: BoxParam, gt: BoxParam, beta: float = 1.0,
              with_grad: bool = True) -> LossValue:
    """Elementwise Huber on the six parameters, summed."""
    return _scalar("smooth_l1", pred, gt, beta, with_grad)


def diou_loss(pred: BoxParam, gt: BoxParam, with_grad: bool = True) -> LossValue:
    """1 - IoU + squared center gap over squared enclosing diagonal."""
    return _scalar("diou", pred, gt, 1.0, with_grad)


def vciou_loss(pred: BoxParam, gt: BoxParam, with_grad: bool = True) -> LossValue:
    """Distance-IoU loss plus the weighted aspect-consistency penalty."""
    return _scalar("vciou", pred, gt, 1.0, with_grad)


def loss_components(pred: BoxParam, gt: BoxParam) -> dict[str, float]:
    """Diagnostic breakdown of the IoU-family terms for one pair."""
    p, g = pred.as_row(), gt.as_row()
    iou, _, _ = _iou_parts(p, g, False)
    dist, _, _ = _distance_parts(p, g, False)
    v, _ = _aspect_parts(p[:, 3:], g[:, 3:], False)
    alpha = _alpha_of(iou, v)
    diou = 1.0 - iou + dist
    return {
        "iou": float(iou[0]),
        "distance_term": float(dist[0]),
        "v": float(v[0]),
        "alpha": float(alpha[0]),
        "diou": float(diou[0]),
        "vciou": float(diou[0] + alpha[0] * v[0]),
    }


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

def _face_coincidence(pred_row: np.ndarray, gt_row: np.ndarray, tol: float) -> str | None:
    _, _, pmin, pmax = _split(pred_row[None, :])
    _, _, gmin, gmax = _split(gt_row[None, :])
    pairs = (
        ("min face", pmin[0], gmin[0]),
        ("max face", pmax[0], gmax[0]),
        ("min-vs-max face", pmin[0], gmax[0]),
        ("max-vs-min face", pmax[0], gmin[0]),
    )
    for label, lhs, rhs in pairs:
        gap = np.abs(lhs - rhs)
        if (gap <= tol).any():
            axis = "zyx"[int(np.argmin(gap))]
            return f"{label} coincidence on axis {axis} (gap {gap.min():.3e})"
    return None


def gradient_check(kind: str, pred: BoxParam, gt: BoxParam,
                   step: float = 1e-5, *, beta: float = 1.0) -> float:
    """Compare the analytic gradient against central finite differences.

    The step for parameter j is ``step * max(1, |theta_j|)``. Returns the
    max componentwise deviation relative to the larger of the two gradient
    infinity norms. Raises :class:`NonDifferentiablePoint` if a face or
    corner coincidence (or, for smooth L1, a parameter sitting on the
    quadratic-to-linear boundary) puts the loss on a kink within reach of
    the stencil.

    For the ``vciou`` kernel the trade-off weight ``alpha`` is frozen at
    its value for the unperturbed pair, matching the gradient convention.
    """
    p = pred.as_row()[0]
    g = gt.as_row()[0]
    h = step * np.maximum(1.0, np.abs(p))
    tol = 4.0 * float(h.max())

    if kind in ("diou", "vciou"):
        hit = _face_coincidence(p, g, tol)
        if hit is not None:
            raise NonDifferentiablePoint(hit)
    elif kind == "smooth_l1":
        gap = np.abs(np.abs(p - g) - beta)
        if (gap <= tol).any():
            j = int(np.argmin(gap))
            raise NonDifferentiablePoint(
                f"parameter {PARAM_ORDER[j]} sits on the Huber boundary "
                f"(gap {gap[j]:.3e})"
            )
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    if (p[3:] - h[3:] <= 0).any():
        raise NonDifferentiablePoint("finite-difference step would collapse a size")

    if kind == "vciou":
        comp = loss_components(pred, gt)
        alpha0 = comp["alpha"]

        def value_at(row: np.ndarray) -> float:
            r = row[None, :]
            d, _ = _diou_core(r, g[None, :], False)
            v, _ = _aspect_parts(r[:, 3:], g[None, 3:], False)
            return float(d[0] + alpha0 * v[0])
    else:
        def value_at(row: np.ndarray) -> float:
            res = batch_loss(kind, row[None, :], g[None, :], beta=beta,
                             reduction="none", with_grad=False)
            return float(res.values[0])

    analytic = batch_loss(kind, p[None, :], g[None, :], beta=beta,
                          reduction="none").gradients[0]
    fd = np.empty(6, dtype=np.float64)
    for j in range(6):
        hi = p.copy()
        lo = p.copy()
        hi[j] += h[j]
        lo[j] -= h[j]
        fd[j] = (value_at(hi) - value_at(lo)) / (2.0 * h[j])

    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / scale)
