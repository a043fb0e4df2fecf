"""Loss terms for distributed co-optimization.

Local data losses compare rendered occupancy/depth/color against an agent's
own post-alignment targets; parameter consistency is a quadratic pull toward
peer parameters; render consistency penalizes depth disagreement along rays
shared by peers. All gradients are exact reverse-mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchMismatchError, ConfigError
from .field import InstanceField, render_backward, render_batch

__all__ = [
    "LossWeights", "RayBatch", "DataLossResult", "data_loss",
    "param_consistency_loss", "render_consistency_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_occ: float = 1.0
    lambda_depth: float = 1.0
    lambda_color: float = 1.0
    rho_con: float = 0.1
    rho_rend: float = 1.0

    def __post_init__(self):
        for name in ("lambda_occ", "lambda_depth", "lambda_color", "rho_con", "rho_rend"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class RayBatch:
    """Rays already clipped to one field's AABB, with per-ray targets.

    supervised marks rays whose pixel belongs to this instance (post-alignment
    mask id equals the field's global id); only those carry depth/color terms.
    Depth targets are ray lengths, not camera-z.
    """

    origins: np.ndarray            # (R, 3)
    directions: np.ndarray         # (R, 3) unit
    t_near: np.ndarray             # (R,)
    t_far: np.ndarray              # (R,)
    occ_target: np.ndarray         # (R,) in {0, 1}
    depth_target: np.ndarray       # (R,)
    color_target: np.ndarray       # (R, 3)
    supervised: np.ndarray         # (R,) bool

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class DataLossResult:
    occ: float
    depth: float
    color: float
    total: float
    grad: np.ndarray
    n_rays: int


def _eval_points(field_: InstanceField, depths: np.ndarray, batch: RayBatch):
    from .field import _forward  # cached forward shared with the backward pass

    r, n = depths.shape
    points = batch.origins[:, None, :] + batch.directions[:, None, :] * depths[..., None]
    sigma_flat, color_flat, cache = _forward(field_, points.reshape(-1, 3), want_cache=True)
    return points, sigma_flat.reshape(r, n), color_flat.reshape(r, n, 3), cache


def data_loss(field_: InstanceField, batch: RayBatch, depths: np.ndarray,
              weights: LossWeights) -> DataLossResult:
    """Occupancy, depth and color terms plus d(total)/d(theta) for one field.

    depths is the (R, N) sample matrix for the batch; an empty batch yields
    zero loss and a zero gradient.
    """
    if len(batch) == 0:
        return DataLossResult(0.0, 0.0, 0.0, 0.0,
                              np.zeros_like(field_.theta), 0)
    from .field import _backward

    points, sigma, color, cache = _eval_points(field_, depths, batch)
    occ, depth, col, term = render_batch(depths, sigma, color)

    res_occ = occ - batch.occ_target
    l_occ = float(np.abs(res_occ).sum())
    d_occ = weights.lambda_occ * np.sign(res_occ)

    sup = batch.supervised
    res_depth = np.where(sup, depth - batch.depth_target, 0.0)
    l_depth = float(np.abs(res_depth).sum())
    d_depth = weights.lambda_depth * np.sign(res_depth)

    res_color = np.where(sup[:, None], col - batch.color_target, 0.0)
    l_color = float(np.abs(res_color).sum())
    d_color = weights.lambda_color * np.sign(res_color)

    d_sigma, d_col = render_backward(depths, sigma, color, term, d_occ, d_depth, d_color)
    grad = _backward(field_, cache, sigma.ravel(), color.reshape(-1, 3),
                     d_sigma.ravel(), d_col.reshape(-1, 3))

    total = (weights.lambda_occ * l_occ + weights.lambda_depth * l_depth
             + weights.lambda_color * l_color)
    return DataLossResult(occ=l_occ, depth=l_depth, color=l_color, total=total,
                          grad=grad, n_rays=len(batch))


def param_consistency_loss(theta: np.ndarray, peer_thetas: list[np.ndarray]):
    """Sum of squared parameter distances to peers, with its exact gradient."""
    loss = 0.0
    grad = np.zeros_like(theta)
    for peer in peer_thetas:
        if peer.shape != theta.shape:
            raise ArchMismatchError("peer parameters have a different architecture")
        diff = theta - peer
        loss += float(diff @ diff)
        grad += 2.0 * diff
    return loss, grad


@dataclass
class RenderConsistencyResult:
    loss: float
    grad: np.ndarray
    n_rays: int
    n_skipped: int


def render_consistency_loss(field_: InstanceField, batch: RayBatch,
                            depths: np.ndarray, peer_depths: np.ndarray,
                            grad_scale: float = 1.0) -> RenderConsistencyResult:
    """L1 disagreement between own rendered depth and the peer's, per shared ray.

    peer_depths are constants (rendered by the sender); gradient flows only
    through the local field. grad_scale folds the render-consistency weight
    into the returned gradient.
    """
    if len(batch) == 0:
        return RenderConsistencyResult(0.0, np.zeros_like(field_.theta), 0, 0)
    from .field import _backward

    points, sigma, color, cache = _eval_points(field_, depths, batch)
    occ, depth, col, term = render_batch(depths, sigma, color)

    res = depth - peer_depths
    loss = float(np.abs(res).sum())
    d_depth = grad_scale * np.sign(res)
    zeros = np.zeros_like(d_depth)
    d_sigma, d_col = render_backward(depths, sigma, color, term, zeros, d_depth,
                                     np.zeros((len(batch), 3)))
    grad = _backward(field_, cache, sigma.ravel(), color.reshape(-1, 3),
                     d_sigma.ravel(), d_col.reshape(-1, 3))
    return RenderConsistencyResult(loss=loss, grad=grad, n_rays=len(batch), n_skipped=0)
