"""A small differentiable denoiser with hand-written reverse-mode gradients.

The network applies the same residual MLP to every entry of a channel; its
input is [belief value, sinusoidal time features, masked mean of node
beliefs, masked mean of edge beliefs], so edge predictions see node context
and vice versa while the whole map stays permutation-consistent.  Gradients
flow through the forward pass, the truncated-CDF decoding, and the expected
centers only; belief states are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decode
from .flow import loss_weight
from .validation import check_choice

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class PredictorConfig:
    hidden_width: int = 64
    depth: int = 2
    time_embed_dim: int = 16
    node_channel_kind: str = "discrete"
    sigma_floor: float = decode.SIGMA_FLOOR

    def __post_init__(self):
        check_choice("node_channel_kind", self.node_channel_kind,
                     ("discrete", "continuous"))
        if min(self.hidden_width, self.depth) < 1 or self.time_embed_dim < 2:
            raise ValueError("predictor sizes must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def feature_dim(self):
        # belief value + time features + two context means
        return 1 + self.time_embed_dim + 2


def _segment_shapes(config):
    w, f = config.hidden_width, config.feature_dim
    shapes = {}
    for ch in ("node", "edge"):
        shapes[f"{ch}_in_w"] = (f, w)
        shapes[f"{ch}_in_b"] = (w,)
        for i in range(1, config.depth):
            shapes[f"{ch}_res{i}_w"] = (w, w)
            shapes[f"{ch}_res{i}_b"] = (w,)
        shapes[f"{ch}_mu_w"] = (w,)
        shapes[f"{ch}_mu_b"] = (1,)
        shapes[f"{ch}_sg_w"] = (w,)
        shapes[f"{ch}_sg_b"] = (1,)
    return shapes


class ParamVector:
    """Flat parameter array with named segment views."""

    def __init__(self, config, flat=None):
        self.config = config
        self.layout = {}
        offset = 0
        for name, shape in _segment_shapes(config).items():
            size = int(np.prod(shape))
            self.layout[name] = (offset, shape)
            offset += size
        self.size = offset
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got {flat.shape}")
        self.flat = flat

    def view(self, name):
        offset, shape = self.layout[name]
        return self.flat[offset:offset + int(np.prod(shape))].reshape(shape)

    def copy(self):
        return ParamVector(self.config, self.flat.copy())

    def with_flat(self, flat):
        return ParamVector(self.config, flat)


def init_params(config, rng):
    """Fan-in scaled symmetric-uniform weights, zero biases."""
    pv = ParamVector(config)
    for name, (offset, shape) in pv.layout.items():
        if name.endswith("_b"):
            continue
        fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        size = int(np.prod(shape))
        pv.flat[offset:offset + size] = rng.uniform(-bound, bound, size)
    return pv


def time_features(t, dim):
    """Sinusoidal embedding of t at geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = 2.0 ** np.arange(dim // 2)
    ang = 2.0 * np.pi * t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _masked_mean(values, mask):
    denom = np.maximum(mask.sum(axis=-1), 1.0)
    return (values * mask).sum(axis=-1) / denom


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class PredictorOutput:
    """Masked per-entry Gaussian parameters (mu, sigma) for each channel.

    For a continuous node channel, ``node_mu`` is the direct regression
    output and ``node_sigma`` is None.
    """

    node_mu: np.ndarray
    node_sigma: np.ndarray
    edge_mu: np.ndarray
    edge_sigma: np.ndarray


def _channel_forward(params, config, channel, feats):
    h = np.tanh(feats @ params.view(f"{channel}_in_w")
                + params.view(f"{channel}_in_b"))
    layers = [h]
    units = []
    for i in range(1, config.depth):
        u = np.tanh(h @ params.view(f"{channel}_res{i}_w")
                    + params.view(f"{channel}_res{i}_b"))
        h = h + u
        units.append(u)
        layers.append(h)
    mu = h @ params.view(f"{channel}_mu_w") + params.view(f"{channel}_mu_b")[0]
    sg_lin = h @ params.view(f"{channel}_sg_w") + params.view(f"{channel}_sg_b")[0]
    sigma = _softplus(sg_lin) + config.sigma_floor
    cache = {"feats": feats, "layers": layers, "units": units, "sg_lin": sg_lin}
    return mu, sigma, cache


def _channel_backward(params, config, channel, cache, d_mu, d_sigma, grad):
    h_final = cache["layers"][-1]
    d_sg_lin = d_sigma * _sigmoid(cache["sg_lin"])

    def seg(name):
        offset, shape = grad.layout[name]
        return grad.flat[offset:offset + int(np.prod(shape))].reshape(shape)

    seg(f"{channel}_mu_w")[:] += np.einsum("bew,be->w", h_final, d_mu)
    seg(f"{channel}_mu_b")[:] += d_mu.sum()
    seg(f"{channel}_sg_w")[:] += np.einsum("bew,be->w", h_final, d_sg_lin)
    seg(f"{channel}_sg_b")[:] += d_sg_lin.sum()

    dh = (d_mu[..., None] * params.view(f"{channel}_mu_w")
          + d_sg_lin[..., None] * params.view(f"{channel}_sg_w"))
    for i in range(config.depth - 1, 0, -1):
        u = cache["units"][i - 1]
        h_prev = cache["layers"][i - 1]
        da = dh * (1.0 - u * u)
        seg(f"{channel}_res{i}_w")[:] += np.einsum("bei,bej->ij", h_prev, da)
        seg(f"{channel}_res{i}_b")[:] += da.sum(axis=(0, 1))
        dh = dh + da @ params.view(f"{channel}_res{i}_w").T
    u0 = cache["layers"][0]
    da = dh * (1.0 - u0 * u0)
    seg(f"{channel}_in_w")[:] += np.einsum("bef,bew->fw", cache["feats"], da)
    seg(f"{channel}_in_b")[:] += da.sum(axis=(0, 1))


def _forward_internal(params, config, theta_node, theta_edge, t,
                      node_mask, edge_mask):
    tn = np.atleast_2d(np.asarray(theta_node, dtype=float))
    te = np.atleast_2d(np.asarray(theta_edge, dtype=float))
    nm = np.atleast_2d(np.asarray(node_mask, dtype=float))
    em = np.atleast_2d(np.asarray(edge_mask, dtype=float))
    if tn.shape != nm.shape or te.shape != em.shape:
        raise ValueError("belief/mask shape mismatch")
    B = tn.shape[0]
    if te.shape[0] != B:
        raise ValueError("node and edge batches disagree")
    if not (np.all(np.isfinite(tn)) and np.all(np.isfinite(te))):
        raise ValueError("belief states contain non-finite entries")
    tf = time_features(np.broadcast_to(np.asarray(t, dtype=float), (B,)),
                       config.time_embed_dim)
    node_ctx = _masked_mean(tn, nm)
    edge_ctx = _masked_mean(te, em)

    def feats_for(theta):
        e = theta.shape[1]
        f = np.empty((B, e, config.feature_dim))
        f[..., 0] = theta
        f[..., 1:1 + config.time_embed_dim] = tf[:, None, :]
        f[..., 1 + config.time_embed_dim] = node_ctx[:, None]
        f[..., 2 + config.time_embed_dim] = edge_ctx[:, None]
        return f

    n_mu, n_sigma, n_cache = _channel_forward(params, config, "node", feats_for(tn))
    e_mu, e_sigma, e_cache = _channel_forward(params, config, "edge", feats_for(te))
    return (n_mu, n_sigma, n_cache, e_mu, e_sigma, e_cache, nm, em)


def forward(params, config, theta_node, theta_edge, t, node_mask, edge_mask):
    """Predict per-entry Gaussian parameters; masked entries output zero."""
    squeeze = np.asarray(theta_node).ndim == 1
    n_mu, n_sigma, _, e_mu, e_sigma, _, nm, em = _forward_internal(
        params, config, theta_node, theta_edge, t, node_mask, edge_mask)
    n_mu, n_sigma = n_mu * nm, n_sigma * nm
    e_mu, e_sigma = e_mu * em, e_sigma * em
    if squeeze:
        n_mu, n_sigma, e_mu, e_sigma = n_mu[0], n_sigma[0], e_mu[0], e_sigma[0]
    if config.node_channel_kind == "continuous":
        n_sigma = None
    return PredictorOutput(node_mu=n_mu, node_sigma=n_sigma,
                           edge_mu=e_mu, edge_sigma=e_sigma)


def masked_mse(pred, target, mask):
    """Mean squared difference over valid entries; 0 on an empty mask."""
    mask = np.asarray(mask, dtype=float)
    count = mask.sum()
    if count == 0:
        return 0.0
    d = (np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)) * mask
    return float((d * d).sum() / count)


def _center_chain(mu, sigma, grid, valid, eps_prob):
    """Expected centers and the VJP back to (mu, sigma) on valid entries."""
    probs = decode.class_probabilities(mu, sigma, grid, valid, eps_prob=eps_prob)
    xhat = decode.expected_center(probs, grid)

    bounds = grid.boundaries
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    u = (bounds - mu[..., None]) / safe_sigma[..., None]
    interior = np.abs(bounds) < 1.0
    phi = np.exp(-0.5 * u * u) / SQRT_2PI * interior
    dF_dmu = -phi / safe_sigma[..., None]
    dF_dsigma = -phi * u / safe_sigma[..., None]
    cdf = decode.truncated_cdf(bounds, mu[..., None], safe_sigma[..., None])
    raw = cdf[..., 1:] - cdf[..., :-1]
    clipped = np.clip(raw, eps_prob, None)
    total = clipped.sum(axis=-1, keepdims=True)
    unclipped = (raw > eps_prob).astype(float)

    def pullback(d_xhat):
        g = (d_xhat[..., None] * (grid.centers - xhat[..., None]) / total
             * unclipped * valid[..., None])
        d_mu = (g * (dF_dmu[..., 1:] - dF_dmu[..., :-1])).sum(axis=-1)
        d_sigma = (g * (dF_dsigma[..., 1:] - dF_dsigma[..., :-1])).sum(axis=-1)
        return d_mu, d_sigma

    return xhat, pullback


@dataclass
class TrainingBatch:
    """Flow states, encoded targets, and masks for one gradient step."""

    theta_node: np.ndarray
    theta_edge: np.ndarray
    target_node: np.ndarray
    target_edge: np.ndarray
    node_mask: np.ndarray
    edge_mask: np.ndarray
    t: float


def loss_and_grad(params, config, batch, schedule, grid_node, grid_edge,
                  convention="algorithmic", eps_prob=decode.EPS_PROB):
    """Weighted masked-MSE loss over expected centers and its gradient.

    Flow states are constants; the gradient runs through the network, the
    class probabilities, and the expected centers only.  ``batch.t`` may be
    a scalar or one value per graph.
    """
    if np.asarray(batch.theta_node).shape[0] == 0:
        raise ValueError("batch must be nonempty")
    (n_mu, n_sigma, n_cache, e_mu, e_sigma, e_cache, nm, em) = _forward_internal(
        params, config, batch.theta_node, batch.theta_edge, batch.t,
        batch.node_mask, batch.edge_mask)
    B = nm.shape[0]
    t = np.broadcast_to(np.asarray(batch.t, dtype=float), (B,))
    grad = ParamVector(config)
    loss = 0.0

    channels = [
        ("node", n_mu, n_sigma, n_cache, nm,
         np.atleast_2d(np.asarray(batch.target_node, dtype=float)), grid_node),
        ("edge", e_mu, e_sigma, e_cache, em,
         np.atleast_2d(np.asarray(batch.target_edge, dtype=float)), grid_edge),
    ]
    for name, mu, sigma, cache, mask, target, grid in channels:
        w = loss_weight(schedule, name, t, convention)
        count = mask.sum()
        continuous = name == "node" and config.node_channel_kind == "continuous"
        if count == 0:
            continue
        if continuous:
            xhat, pullback = mu, None
        else:
            xhat, pullback = _center_chain(mu, sigma, grid, mask > 0, eps_prob)
        diff = (xhat - target) * mask
        per_graph = (diff * diff).sum(axis=-1)
        if not np.all(np.isfinite(per_graph)):
            bad = int(np.argmax(~np.isfinite(per_graph)))
            raise ValueError(f"non-finite loss at batch index {bad}")
        loss += float((w * per_graph).sum() / count)
        d_xhat = 2.0 * w[:, None] * diff / count
        if continuous:
            d_mu, d_sigma = d_xhat, np.zeros_like(d_xhat)
        else:
            d_mu, d_sigma = pullback(d_xhat)
        _channel_backward(params, config, name, cache, d_mu, d_sigma, grad)
    return loss, grad.flat


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_optimizer_state(n_params):
    return OptimizerState(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def optimizer_step(params_flat, grad, state, lr=1e-4, weight_decay=1e-12,
                   clip_norm=10000.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Decoupled-weight-decay Adam step after global-norm clipping."""
    g = np.asarray(grad, dtype=float)
    if clip_norm is not None and clip_norm > 0:
        gnorm = np.linalg.norm(g)
        if gnorm > clip_norm:
            g = g * (clip_norm / gnorm)
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params_flat
    return params_flat - lr * update, state
