"""Per-instance implicit field: a small MLP over positionally encoded points
with exact hand-rolled reverse-mode gradients, stratified ray sampling,
occupancy-style termination probabilities and volume rendering.

All math runs in float64; sigma and color are squashed to (0,1) so the
termination product form stays a probability.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArchMismatchError, BadMagicError, ContractError,
                     TruncatedBufferError, VersionMismatchError)
from .geometry import ray_aabb_clip

FIELD_MAGIC = b"OMFP"
FIELD_WIRE_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sHHHHqQ6dBI")
FIELD_HEADER_SIZE = _FIELD_HEADER.size


@dataclass(frozen=True)
class FieldArch:
    n_freqs: int = 6
    hidden_layers: int = 2
    width: int = 32

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.n_freqs

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.width] * self.hidden_layers + [4]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def init_params(arch: FieldArch, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled Gaussian weights, zero biases, small final layer."""
    chunks = []
    shapes = arch.layer_shapes()
    for li, (fan_in, fan_out) in enumerate(shapes):
        scale = 1.0 / np.sqrt(fan_in)
        if li == len(shapes) - 1:
            scale *= 0.1
        chunks.append(rng.normal(0.0, scale, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _unpack(theta: np.ndarray, arch: FieldArch) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    off = 0
    for fan_in, fan_out in arch.layer_shapes():
        w = theta[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = theta[off:off + fan_out]
        off += fan_out
        layers.append((w, b))
    if off != len(theta):
        raise ContractError(f"theta length {len(theta)} does not match arch ({off})")
    return layers


@dataclass
class InstanceField:
    theta: np.ndarray
    arch: FieldArch
    aabb: np.ndarray               # (2, 3) world bounds
    global_id: int
    version: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.aabb = np.asarray(self.aabb, dtype=np.float64)
        if self.theta.shape != (self.arch.param_count(),):
            raise ContractError("theta length inconsistent with arch")
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ContractError("degenerate aabb")

    def apply_update(self, theta: np.ndarray) -> None:
        """Replace parameters; every mutation bumps the version counter."""
        if theta.shape != self.theta.shape:
            raise ContractError("parameter update shape mismatch")
        self.theta = np.asarray(theta, dtype=np.float64)
        self.version += 1

    def local(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        return 2.0 * (points - lo) / (hi - lo) - 1.0


def encode(points_local: np.ndarray, n_freqs: int) -> np.ndarray:
    """Raw coordinates plus sin/cos at octave frequencies."""
    feats = [points_local]
    for l in range(n_freqs):
        w = (2.0**l) * np.pi
        feats.append(np.sin(w * points_local))
        feats.append(np.cos(w * points_local))
    return np.concatenate(feats, axis=-1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(field_: InstanceField, points: np.ndarray, want_cache: bool):
    if not np.all(np.isfinite(points)):
        raise ContractError("non-finite query points")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = encode(field_.local(pts), field_.arch.n_freqs)
    layers = _unpack(field_.theta, field_.arch)
    acts = [h]
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    z = h @ w + b
    out = _sigmoid(z)
    sigma = out[:, 0]
    color = out[:, 1:4]
    cache = (acts, out) if want_cache else None
    return sigma, color, cache


def field_eval(field_: InstanceField, points: np.ndarray):
    """Evaluate (sigma, color) at world points; deterministic, pure."""
    sigma, color, _ = _forward(field_, points, want_cache=False)
    return sigma, color


def field_grad(field_: InstanceField, points: np.ndarray,
               d_sigma: np.ndarray, d_color: np.ndarray) -> np.ndarray:
    """d(loss)/d(theta) for upstream gradients on sigma and color."""
    sigma, color, cache = _forward(field_, points, want_cache=True)
    return _backward(field_, cache, sigma, color, d_sigma, d_color)


def _backward(field_: InstanceField, cache, sigma, color, d_sigma, d_color) -> np.ndarray:
    d_sigma = np.asarray(d_sigma, dtype=np.float64)
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_sigma.shape != sigma.shape or d_color.shape != color.shape:
        raise ContractError("upstream gradient shapes do not match forward outputs")
    acts, out = cache
    layers = _unpack(field_.theta, field_.arch)

    dz = np.empty_like(out)
    dz[:, 0] = d_sigma * out[:, 0] * (1.0 - out[:, 0])
    dz[:, 1:4] = d_color * out[:, 1:4] * (1.0 - out[:, 1:4])

    grads: list[np.ndarray] = [None] * (2 * len(layers))
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a_prev = acts[li]
        grads[2 * li] = (a_prev.T @ dz).ravel()
        grads[2 * li + 1] = dz.sum(axis=0)
        if li > 0:
            da = dz @ w.T
            dz = da * (1.0 - acts[li] ** 2)
    return np.concatenate(grads)


# --- rays and sampling ------------------------------------------------------

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray          # unit
    t_near: float
    t_far: float
    pixel: tuple[int, int] | None = None
    agent_id: int | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ContractError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ContractError("ray needs t_near < t_far")

    def at(self, t: np.ndarray) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)


def clip_ray(origin: np.ndarray, direction: np.ndarray, aabb: np.ndarray,
             pixel=None, agent_id=None) -> Ray | None:
    """Ray clipped to an AABB, or None when it misses."""
    hit = ray_aabb_clip(origin, direction, aabb)
    if hit is None:
        return None
    t0, t1 = hit
    if t1 - t0 < 1e-9:
        return None
    return Ray(origin=origin, direction=direction, t_near=t0, t_far=t1,
               pixel=pixel, agent_id=agent_id)


def sample_ray(ray: Ray, n: int, strategy: str = "stratified",
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Ascending sample depths, one per bin over [t_near, t_far]."""
    if n < 2:
        raise ContractError("need at least 2 samples per ray")
    edges = np.linspace(ray.t_near, ray.t_far, n + 1)
    widths = np.diff(edges)
    if strategy == "midpoint":
        u = np.full(n, 0.5)
    elif strategy == "stratified":
        if rng is None:
            raise ContractError("stratified sampling needs an rng")
        u = rng.uniform(size=n)
    else:
        raise ContractError(f"unknown sampling strategy {strategy!r}")
    return edges[:-1] + u * widths


def sample_depth_matrix(t_near: np.ndarray, t_far: np.ndarray, n: int,
                        rng: np.random.Generator | None,
                        strategy: str = "stratified") -> np.ndarray:
    """Stratified depths for a batch of rays, shape (R, n)."""
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    grid = np.linspace(0.0, 1.0, n + 1)[None, :]
    edges = t_near + (t_far - t_near) * grid
    if strategy == "midpoint":
        u = np.full((len(t_near), n), 0.5)
    else:
        if rng is None:
            raise ContractError("stratified sampling needs an rng")
        u = rng.uniform(size=(len(t_near), n))
    return edges[:, :-1] + u * np.diff(edges, axis=1)


@dataclass
class RaySamples:
    depths: np.ndarray             # (N,) ascending
    points: np.ndarray             # (N, 3)
    sigma: np.ndarray              # (N,)
    color: np.ndarray              # (N, 3)
    termination: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.termination is None:
            self.termination = termination_probs(self.sigma)


def make_samples(field_: InstanceField, ray: Ray, depths: np.ndarray) -> RaySamples:
    points = ray.at(depths)
    sigma, color = field_eval(field_, points)
    return RaySamples(depths=depths, points=points, sigma=sigma, color=color)


# --- termination and rendering ----------------------------------------------

def termination_probs(sigma: np.ndarray) -> np.ndarray:
    """T_p = sigma_p * prod_{q<p} (1 - sigma_q), along the last axis."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0.0) or np.any(sigma > 1.0):
        raise ContractError("sigma values must lie in [0,1]")
    one_minus = 1.0 - sigma
    running = np.cumprod(one_minus, axis=-1)
    ones = np.ones(sigma.shape[:-1] + (1,))
    upstream = np.concatenate([ones, running[..., :-1]], axis=-1)
    return sigma * upstream


def termination_backward(sigma: np.ndarray, d_term: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of termination_probs (no divisions)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d_term = np.asarray(d_term, dtype=np.float64)
    one_minus = 1.0 - sigma
    running = np.cumprod(one_minus, axis=-1)
    ones = np.ones(sigma.shape[:-1] + (1,))
    upstream = np.concatenate([ones, running[..., :-1]], axis=-1)

    d_sigma = np.zeros_like(sigma)
    d_up = np.zeros(sigma.shape[:-1])
    n = sigma.shape[-1]
    for p in range(n - 1, -1, -1):
        d_sigma[..., p] = d_term[..., p] * upstream[..., p] - d_up * upstream[..., p]
        d_up = d_term[..., p] * sigma[..., p] + d_up * one_minus[..., p]
    return d_sigma


def render_ray(samples: RaySamples) -> tuple[float, float, np.ndarray]:
    """Rendered (occupancy, depth, color) sums along one ray."""
    t = samples.termination
    occ = float(t.sum())
    depth = float((t * samples.depths).sum())
    color = (t[:, None] * samples.color).sum(axis=0)
    return occ, depth, color


def render_batch(depths: np.ndarray, sigma: np.ndarray, color: np.ndarray):
    """Batched render sums: depths/sigma (R, N), color (R, N, 3)."""
    t = termination_probs(sigma)
    occ = t.sum(axis=1)
    depth = (t * depths).sum(axis=1)
    col = (t[..., None] * color).sum(axis=1)
    return occ, depth, col, t


def render_backward(depths: np.ndarray, sigma: np.ndarray, color: np.ndarray,
                    t: np.ndarray, d_occ: np.ndarray, d_depth: np.ndarray,
                    d_color: np.ndarray):
    """Gradients of batched render sums w.r.t. per-sample sigma and color."""
    d_term = d_occ[:, None] + d_depth[:, None] * depths + np.einsum(
        "rj,rnj->rn", d_color, color)
    d_sigma = termination_backward(sigma, d_term)
    d_col = t[..., None] * d_color[:, None, :]
    return d_sigma, d_col


@dataclass
class CompositeResult:
    depth: float
    color: np.ndarray
    occupancy: dict[int, float]    # per-instance summed termination


def composite_pixel(per_instance: list[tuple[int, RaySamples]]) -> CompositeResult:
    """Depth-ranked integration of all instances intersected by one pixel ray.

    Samples from every instance merge into one ascending sequence; termination
    probabilities run over the merged sequence, and each instance's occupancy
    is the sum of its own merged terms.
    """
    if not per_instance:
        return CompositeResult(depth=0.0, color=np.zeros(3), occupancy={})
    depths = np.concatenate([s.depths for _, s in per_instance])
    sigma = np.concatenate([s.sigma for _, s in per_instance])
    color = np.concatenate([s.color for _, s in per_instance], axis=0)
    owner = np.concatenate([np.full(len(s.depths), i) for i, (_, s) in enumerate(per_instance)])
    order = np.argsort(depths, kind="stable")
    t = termination_probs(sigma[order])
    d_sorted = depths[order]
    c_sorted = color[order]
    owner_sorted = owner[order]
    occ: dict[int, float] = {}
    for i, (gid, _) in enumerate(per_instance):
        occ[gid] = float(t[owner_sorted == i].sum())
    return CompositeResult(depth=float((t * d_sorted).sum()),
                           color=(t[:, None] * c_sorted).sum(axis=0),
                           occupancy=occ)


# --- serialization (the exact payload the bus ships) -------------------------

def serialize_field(field_: InstanceField, coverage: int = 0) -> bytes:
    """Little-endian parameter dump; header carries arch, ids, bounds, coverage."""
    if not 0 <= coverage <= 0xFF:
        raise ContractError("coverage octant mask must fit a byte")
    header = _FIELD_HEADER.pack(
        FIELD_MAGIC, FIELD_WIRE_VERSION,
        field_.arch.n_freqs, field_.arch.hidden_layers, field_.arch.width,
        field_.global_id, field_.version,
        *field_.aabb.ravel().tolist(),
        coverage, len(field_.theta))
    return header + field_.theta.astype("<f8").tobytes()


def deserialize_field(buf: bytes) -> tuple[InstanceField, int]:
    """Inverse of serialize_field; returns (field, coverage mask)."""
    if len(buf) < FIELD_HEADER_SIZE:
        raise TruncatedBufferError("field blob shorter than its header")
    (magic, version, n_freqs, hidden_layers, width, global_id, version_counter,
     *rest) = _FIELD_HEADER.unpack_from(buf)
    if magic != FIELD_MAGIC:
        raise BadMagicError(f"expected {FIELD_MAGIC!r}")
    if version != FIELD_WIRE_VERSION:
        raise VersionMismatchError(f"field wire version {version}")
    aabb = np.array(rest[:6], dtype=np.float64).reshape(2, 3)
    coverage, theta_len = rest[6], rest[7]
    need = FIELD_HEADER_SIZE + 8 * theta_len
    if len(buf) < need:
        raise TruncatedBufferError(f"field blob truncated: {len(buf)} < {need}")
    theta = np.frombuffer(buf, dtype="<f8", count=theta_len,
                          offset=FIELD_HEADER_SIZE).astype(np.float64)
    arch = FieldArch(n_freqs=n_freqs, hidden_layers=hidden_layers, width=width)
    if theta_len != arch.param_count():
        raise ArchMismatchError("theta length does not match the declared arch")
    f = InstanceField(theta=theta, arch=arch, aabb=aabb, global_id=global_id,
                      version=version_counter)
    return f, coverage
