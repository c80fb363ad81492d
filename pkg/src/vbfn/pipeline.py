"""End-to-end training and sampling loops, synthetic tree datasets, and
desk-scale generation metrics.

Graphs are padded to the dataset's max_n; the node channel is the flat
vector of node entries and the edge channel is the vector of upper-triangle
slots.  Precision operators depend on the validity mask, so they are cached
per node count.  Chains with equal node count share operators and are
advanced together as columns of one block solve.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import decode, graphs, predictor
from .flow import (BeliefState, alpha_increment, beta_at, clamp_time,
                   sample_flow_state)
from .graphs import (Dataset, DatasetMeta, NO_EDGE_CLASS, build_class_grid,
                     build_masks, edge_vectorization, encode_continuous,
                     make_sample, size_histogram, upper_triangle_pairs)
from .solver import SolveStats, sample_noise_with_covariance
from .structure import (build_edge_dependency_line_complete,
                        build_node_dependency_complete, build_obs_precision,
                        build_prior_precision)
from .validation import as_rng

# rng stream tags, so training, sampling, and init draw from disjoint streams
_INIT, _STEP, _CHAIN, _SIZES = 101, 211, 307, 401


@dataclass(frozen=True)
class PrecisionSettings:
    node_mode: str = "complete"
    edge_mode: str = "line_complete"
    obs_mode: str = "diag_prior"
    lambda_x: float = 0.2
    lambda_a: float = 0.2
    eps: float = 1e-2
    eps_obs: float = 1e-2


@dataclass(frozen=True)
class ChannelOperators:
    prior: object
    obs: object
    mask: np.ndarray
    dim: int


@dataclass(frozen=True)
class GraphOperators:
    n: int
    node: ChannelOperators
    edge: ChannelOperators


class OperatorCache:
    """Per-node-count precision operators on the padded grid."""

    def __init__(self, settings, meta):
        if settings.node_mode != "complete":
            raise ValueError(f"unsupported node prior mode {settings.node_mode!r}")
        if settings.edge_mode != "line_complete":
            raise ValueError(f"unsupported edge prior mode {settings.edge_mode!r}")
        self.settings = settings
        self.meta = meta
        self._cache = {}
        self._node_dep = build_node_dependency_complete(
            meta.max_n, meta.d_x, settings.lambda_x)
        self._edge_dep = build_edge_dependency_line_complete(
            meta.max_n, 1, settings.lambda_a)
        self.full_vec = edge_vectorization(np.ones((meta.max_n, meta.max_n)))

    def masks_for(self, n):
        node_mask, edge_mask = build_masks(n, self.meta.max_n,
                                           self.meta.mask_diag_edges)
        node_vec = np.repeat(node_mask.astype(float), self.meta.d_x)
        edge_vec = edge_mask[self.full_vec.rows, self.full_vec.cols].astype(float)
        return node_vec, edge_vec

    def get(self, n):
        if n not in self._cache:
            node_vec, edge_vec = self.masks_for(n)
            s = self.settings
            node_prior = build_prior_precision(self._node_dep, node_vec, s.eps)
            edge_prior = build_prior_precision(self._edge_dep, edge_vec, s.eps)
            node_obs = build_obs_precision(node_prior, s.obs_mode, s.eps_obs)
            edge_obs = build_obs_precision(edge_prior, s.obs_mode, s.eps_obs)
            self._cache[n] = GraphOperators(
                n=n,
                node=ChannelOperators(node_prior, node_obs, node_vec,
                                      node_prior.dim),
                edge=ChannelOperators(edge_prior, edge_obs, edge_vec,
                                      edge_prior.dim))
        return self._cache[n]


def encode_targets(sample, meta, grid_node, grid_edge, full_vec):
    """Padded channel targets: node vector and upper-triangle edge vector."""
    enc = encode_continuous(sample, grid_node, grid_edge)
    a_vec = enc.a_c[full_vec.rows, full_vec.cols]
    return enc.x_c, a_vec


def grids_for(meta):
    grid_node = build_class_grid(max(meta.k_node, 1))
    grid_edge = build_class_grid(meta.k_edge)
    return grid_node, grid_edge


def _group_by_n(samples, indices):
    groups = {}
    for idx in indices:
        groups.setdefault(samples[idx].n, []).append(idx)
    return dict(sorted(groups.items()))


def train_step(params, opt_state, batch_samples, cache, schedule, solver_cfg,
               pred_config, grids, rng, *, lr, weight_decay, clip_norm,
               convention="algorithmic", eps_prob=decode.EPS_PROB,
               per_graph_t=False, stats=None):
    """One gradient step of the training loop.

    Draws one t for the batch (or one per graph), samples flow states per
    node-count group in closed form, and applies a clipped Adam update on
    the weighted masked-MSE over decoded expected centers.
    """
    grid_node, grid_edge = grids
    meta = cache.meta
    B = len(batch_samples)
    if per_graph_t:
        t = clamp_time(schedule, rng.uniform(size=B))
    else:
        t = float(clamp_time(schedule, rng.uniform()))
    beta_node = beta_at(schedule, "node", t)
    beta_edge = beta_at(schedule, "edge", t)

    dim_node = meta.max_n * meta.d_x
    dim_edge = cache.full_vec.size
    theta_node = np.zeros((B, dim_node))
    theta_edge = np.zeros((B, dim_edge))
    target_node = np.zeros((B, dim_node))
    target_edge = np.zeros((B, dim_edge))
    node_mask = np.zeros((B, dim_node))
    edge_mask = np.zeros((B, dim_edge))

    for b, sample in enumerate(batch_samples):
        target_node[b], target_edge[b] = encode_targets(
            sample, meta, grid_node, grid_edge, cache.full_vec)

    for n, group in _group_by_n(batch_samples, range(B)).items():
        ops = cache.get(n)
        node_mask[group] = ops.node.mask
        edge_mask[group] = ops.edge.mask
        for channel, theta_all, targets, betas in (
                (ops.node, theta_node, target_node, beta_node),
                (ops.edge, theta_edge, target_edge, beta_edge)):
            if per_graph_t:
                # group members carry distinct betas; solve one at a time
                for b in group:
                    theta_all[b] = sample_flow_state(
                        targets[b], channel.prior, channel.obs,
                        float(np.asarray(betas)[b]), rng, solver_cfg,
                        mask=channel.mask, stats=stats)
            else:
                z = targets[group].T
                theta = sample_flow_state(z, channel.prior, channel.obs,
                                          float(betas), rng, solver_cfg,
                                          mask=channel.mask, stats=stats)
                theta_all[group] = theta.T

    batch = predictor.TrainingBatch(
        theta_node=theta_node, theta_edge=theta_edge,
        target_node=target_node, target_edge=target_edge,
        node_mask=node_mask, edge_mask=edge_mask, t=t)
    loss, grad = predictor.loss_and_grad(params, pred_config, batch, schedule,
                                         grid_node, grid_edge,
                                         convention=convention,
                                         eps_prob=eps_prob)
    new_flat, opt_state = predictor.optimizer_step(
        params.flat, grad, opt_state, lr=lr, weight_decay=weight_decay,
        clip_norm=clip_norm)
    return loss, params.with_flat(new_flat), opt_state


@dataclass
class Checkpoint:
    """Versioned training state; serializes to JSON."""

    version: int
    config: dict
    meta: DatasetMeta
    histogram: dict
    params: predictor.ParamVector
    opt_state: predictor.OptimizerState
    step: int
    seed: int

    def to_json(self):
        segments = {name: self.params.view(name).reshape(-1).tolist()
                    for name in self.params.layout}
        return json.dumps({
            "version": self.version,
            "config": self.config,
            "meta": {"K_X": self.meta.k_node, "K_A": self.meta.k_edge,
                     "max_n": self.meta.max_n,
                     "node_channel": self.meta.node_channel,
                     "d_x": self.meta.d_x,
                     "mask_diag_edges": self.meta.mask_diag_edges},
            "size_histogram": {str(k): v for k, v in self.histogram.items()},
            "param_segments": segments,
            "optimizer": {"m": self.opt_state.m.tolist(),
                          "v": self.opt_state.v.tolist(),
                          "step": self.opt_state.step},
            "step": self.step,
            "seed": self.seed,
        })

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path, pred_config):
        with open(path) as fh:
            raw = json.load(fh)
        if raw.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {raw.get('version')!r}")
        meta = DatasetMeta(k_node=raw["meta"]["K_X"], k_edge=raw["meta"]["K_A"],
                           max_n=raw["meta"]["max_n"],
                           node_channel=raw["meta"]["node_channel"],
                           d_x=raw["meta"].get("d_x", 1),
                           mask_diag_edges=raw["meta"].get("mask_diag_edges", True))
        pv = predictor.ParamVector(pred_config)
        for name, values in raw["param_segments"].items():
            pv.view(name)[:] = np.asarray(values).reshape(pv.layout[name][1])
        opt = predictor.OptimizerState(m=np.asarray(raw["optimizer"]["m"]),
                                       v=np.asarray(raw["optimizer"]["v"]),
                                       step=raw["optimizer"]["step"])
        hist = {int(k): v for k, v in raw["size_histogram"].items()}
        return cls(version=1, config=raw["config"], meta=meta, histogram=hist,
                   params=pv, opt_state=opt, step=raw["step"], seed=raw["seed"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list
    log_rows: list = field(default_factory=list)
    stats: SolveStats = field(default_factory=SolveStats)


def fit_params(samples, meta, *, schedule, precision, solver_cfg, pred_config,
               seed, steps, batch_size, lr, weight_decay, clip_norm,
               convention="algorithmic", eps_prob=decode.EPS_PROB,
               per_graph_t=False, start=None, log_every=50, log_cb=None,
               checkpoint_every=0, checkpoint_cb=None, config_echo=None):
    """Deterministic training loop over an in-memory dataset.

    Every step re-derives its RNG from (seed, step), so resuming from a
    checkpoint continues bit-identically.  ``checkpoint_cb`` receives a
    Checkpoint every ``checkpoint_every`` steps.
    """
    cache = OperatorCache(precision, meta)
    grids = grids_for(meta)
    if start is None:
        params = init_params_for(pred_config, seed)
        opt_state = predictor.init_optimizer_state(params.size)
        step0 = 0
    else:
        params, opt_state, step0 = start.params, start.opt_state, start.step
    histogram = size_histogram(samples)

    def snapshot(step):
        return Checkpoint(version=1, config=config_echo or {}, meta=meta,
                          histogram=histogram, params=params,
                          opt_state=opt_state, step=step, seed=seed)

    losses = []
    log_rows = []
    stats = SolveStats()
    t0 = time.perf_counter()
    for step in range(step0, steps):
        rng = np.random.default_rng((seed, _STEP, step))
        idx = rng.integers(0, len(samples), size=batch_size)
        batch = [samples[i] for i in idx]
        loss, params, opt_state = train_step(
            params, opt_state, batch, cache, schedule, solver_cfg, pred_config,
            grids, rng, lr=lr, weight_decay=weight_decay, clip_norm=clip_norm,
            convention=convention, eps_prob=eps_prob, per_graph_t=per_graph_t,
            stats=stats)
        losses.append(loss)
        if log_every and ((step + 1) % log_every == 0 or step == steps - 1):
            row = (step + 1, loss, time.perf_counter() - t0, stats.failures)
            log_rows.append(row)
            if log_cb:
                log_cb(*row)
        if (checkpoint_cb and checkpoint_every
                and (step + 1) % checkpoint_every == 0 and step + 1 < steps):
            checkpoint_cb(snapshot(step + 1))
    return TrainResult(checkpoint=snapshot(steps), losses=losses,
                       log_rows=log_rows, stats=stats)


def init_params_for(pred_config, seed):
    return predictor.init_params(pred_config, np.random.default_rng((seed, _INIT)))


def _decode_step(params, pred_config, grids, theta_node, theta_edge, t,
                 node_mask, edge_mask, eps_prob):
    """Predict and reduce to per-entry center means for both channels."""
    grid_node, grid_edge = grids
    out = predictor.forward(params, pred_config, theta_node, theta_edge, t,
                            node_mask, edge_mask)
    if pred_config.node_channel_kind == "continuous":
        node_mean = out.node_mu
        node_probs = None
    else:
        node_probs = decode.class_probabilities(out.node_mu, out.node_sigma,
                                                grids[0], node_mask,
                                                eps_prob=eps_prob)
        node_mean = decode.expected_center(node_probs, grid_node) * node_mask
    edge_probs = decode.class_probabilities(out.edge_mu, out.edge_sigma,
                                            grid_edge, edge_mask,
                                            eps_prob=eps_prob)
    edge_mean = decode.expected_center(edge_probs, grid_edge) * edge_mask
    return node_mean, edge_mean, node_probs, edge_probs


def sample_graphs(params, meta, *, schedule, precision, solver_cfg, pred_config,
                  histogram, count, seed, steps=None,
                  eps_prob=decode.EPS_PROB, stats=None):
    """Generate graphs by iterative Bayesian fusion of predicted messages.

    Node counts are drawn from the training-size histogram.  Chains with the
    same node count share precision operators and advance as one block.  The
    final decode at t = 1 takes the argmax class per entry and enforces
    masks and symmetry.
    """
    T = int(steps or schedule.steps)
    cache = OperatorCache(precision, meta)
    grids = grids_for(meta)
    stats = stats if stats is not None else SolveStats()

    sizes = sorted(histogram)
    weights = np.array([histogram[s] for s in sizes], dtype=float)
    size_rng = np.random.default_rng((seed, _SIZES))
    ns = size_rng.choice(sizes, size=count, p=weights / weights.sum())

    results = [None] * count
    for n, chain_ids in _group_by_n_values(ns).items():
        ops = cache.get(int(n))
        m = len(chain_ids)
        chain_rngs = [np.random.default_rng((seed, _CHAIN, int(c)))
                      for c in chain_ids]
        node_state = BeliefState(ops.node.prior, ops.node.obs,
                                 np.zeros((ops.node.dim, m)))
        edge_state = BeliefState(ops.edge.prior, ops.edge.obs,
                                 np.zeros((ops.edge.dim, m)))
        node_mask = np.broadcast_to(ops.node.mask, (m, ops.node.dim))
        edge_mask = np.broadcast_to(ops.edge.mask, (m, ops.edge.dim))

        for i in range(1, T + 1):
            t_eval = float(clamp_time(schedule, (i - 1) / T))
            # increments ride the unclamped grid so they telescope to beta(1)
            alpha_node = float(alpha_increment(schedule, "node", (i - 1) / T, i / T))
            alpha_edge = float(alpha_increment(schedule, "edge", (i - 1) / T, i / T))
            theta_node = node_state.posterior_mean(solver_cfg, stats=stats)
            theta_edge = edge_state.posterior_mean(solver_cfg, stats=stats)
            node_mean, edge_mean, _, _ = _decode_step(
                params, pred_config, grids,
                (theta_node * ops.node.mask[:, None]).T,
                (theta_edge * ops.edge.mask[:, None]).T,
                t_eval, node_mask, edge_mask, eps_prob)
            if alpha_node > 0:
                noise = np.column_stack([
                    sample_noise_with_covariance(ops.node.obs, alpha_node,
                                                 "covariance", rng)
                    for rng in chain_rngs])
                node_state.fuse(node_mean.T + noise, alpha_node)
            if alpha_edge > 0:
                noise = np.column_stack([
                    sample_noise_with_covariance(ops.edge.obs, alpha_edge,
                                                 "covariance", rng)
                    for rng in chain_rngs])
                edge_state.fuse(edge_mean.T + noise, alpha_edge)

        theta_node = node_state.posterior_mean(solver_cfg, stats=stats)
        theta_edge = edge_state.posterior_mean(solver_cfg, stats=stats)
        _, _, node_probs, edge_probs = _decode_step(
            params, pred_config, grids,
            (theta_node * ops.node.mask[:, None]).T,
            (theta_edge * ops.edge.mask[:, None]).T,
            1.0, node_mask, edge_mask, eps_prob)
        edge_cls = decode.decode_discrete(edge_probs)
        if pred_config.node_channel_kind == "continuous":
            node_vals = (theta_node * ops.node.mask[:, None]).T
        else:
            node_cls = decode.decode_discrete(node_probs)
        for k, cid in enumerate(chain_ids):
            grid = np.full((meta.max_n, meta.max_n), NO_EDGE_CLASS, dtype=np.int64)
            grid[cache.full_vec.rows, cache.full_vec.cols] = edge_cls[k]
            grid[cache.full_vec.cols, cache.full_vec.rows] = edge_cls[k]
            _, emask = build_masks(int(n), meta.max_n, meta.mask_diag_edges)
            grid = np.where(emask > 0, grid, NO_EDGE_CLASS)
            edges = [(int(i), int(j), int(grid[i, j]))
                     for i, j in zip(*upper_triangle_pairs(meta.max_n))
                     if grid[i, j] != NO_EDGE_CLASS and emask[i, j] > 0]
            if pred_config.node_channel_kind == "continuous":
                coords = node_vals[k].reshape(meta.max_n, meta.d_x)[:int(n)]
                results[cid] = make_sample(int(n), meta.max_n, edges=edges,
                                           node_coords=coords,
                                           mask_diag_edges=meta.mask_diag_edges)
            else:
                results[cid] = make_sample(int(n), meta.max_n,
                                           node_classes=node_cls[k][:int(n)],
                                           edges=edges,
                                           mask_diag_edges=meta.mask_diag_edges)
    return results


def _group_by_n_values(ns):
    groups = {}
    for idx, n in enumerate(ns):
        groups.setdefault(int(n), []).append(idx)
    return dict(sorted(groups.items()))


# ---------------------------------------------------------------------------
# synthetic trees


def _prufer_to_edges(seq, n):
    degree = np.ones(n, dtype=np.int64)
    for s in seq:
        degree[s] += 1
    edges = []
    for s in seq:
        leaf = int(np.argmax(degree == 1))
        edges.append((min(leaf, int(s)), max(leaf, int(s))))
        degree[leaf] -= 1
        degree[s] -= 1
    u, v = np.flatnonzero(degree == 1)[:2]
    edges.append((int(u), int(v)))
    return edges


def gen_random_trees(count, n, seed, max_n=None, edge_class=2):
    """Uniform random labeled trees on n nodes via their Prufer codes."""
    if n < 2:
        raise ValueError("trees need n >= 2")
    rng = as_rng(seed)
    max_n = max_n or n
    out = []
    for _ in range(count):
        seq = rng.integers(0, n, size=max(n - 2, 0))
        edges = [(i, j, edge_class) for i, j in _prufer_to_edges(seq, n)]
        out.append(make_sample(n, max_n, node_classes=[1] * n, edges=edges))
    return out


def gen_tree_dataset(count, n_min, n_max, seed):
    """A dataset of uniform trees with sizes drawn uniformly in [n_min, n_max]."""
    rng = as_rng(seed)
    samples = []
    for _ in range(count):
        n = int(rng.integers(n_min, n_max + 1))
        samples.extend(gen_random_trees(1, n, rng, max_n=n_max))
    meta = DatasetMeta(k_node=1, k_edge=2, max_n=n_max)
    return Dataset(samples=samples, meta=meta)


def is_valid_tree(sample):
    """Connected with exactly n - 1 edges over the valid nodes."""
    n = sample.n
    edges = [(i, j) for i, j, _ in sample.edge_list() if i < n and j < n]
    if len(edges) != n - 1:
        return False
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = n
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            comps -= 1
    return comps == 1


# ---------------------------------------------------------------------------
# canonical hashing and generation metrics


def _digest(text):
    return hashlib.blake2b(text.encode(), digest_size=16).hexdigest()


def wl_hash(sample, rounds=3):
    """Order-invariant graph hash by iterated color refinement.

    Colors start from node classes and absorb the sorted multiset of
    (edge class, neighbor color) pairs for ``rounds`` iterations; pairs with
    the no-edge class are not adjacent.  Non-isomorphic graphs that 1-WL
    cannot separate may collide.
    """
    n = sample.n
    if sample.continuous_nodes:
        colors = [_digest(",".join(f"{v:.6f}" for v in sample.node_classes[i]))
                  for i in range(n)]
    else:
        colors = [str(int(sample.node_classes[i])) for i in range(n)]
    adj = [[] for _ in range(n)]
    for i, j, cls in sample.edge_list():
        adj[i].append((j, cls))
        adj[j].append((i, cls))
    for _ in range(rounds):
        colors = [_digest(colors[i] + "|" + ";".join(
            sorted(f"{cls}:{colors[j]}" for j, cls in adj[i])))
            for i in range(n)]
    return _digest(f"n={n}|" + ",".join(sorted(colors)))


@dataclass
class MetricsReport:
    validity: float
    uniqueness: float
    novelty: float
    vun: float
    counts: dict
    degree_histogram: dict

    def to_json(self):
        return json.dumps({
            "validity": self.validity, "uniqueness": self.uniqueness,
            "novelty": self.novelty, "vun": self.vun, "counts": self.counts,
            "degree_histogram": {str(k): v for k, v in
                                 sorted(self.degree_histogram.items())},
        })


def evaluate_vun(samples, train_set, validity_fn=is_valid_tree):
    """Validity, uniqueness, and novelty of a sample set.

    Uniqueness is the fraction of distinct canonical hashes among the
    samples; novelty is the fraction of samples whose hash does not occur in
    the training set.
    """
    if not samples:
        raise ValueError("samples must be nonempty")
    total = len(samples)
    hashes = [wl_hash(s) for s in samples]
    train_hashes = {wl_hash(s) for s in train_set}
    valid = [validity_fn(s) for s in samples]
    seen = {}
    for h in hashes:
        seen[h] = seen.get(h, 0) + 1
    novel = [h not in train_hashes for h in hashes]
    vun = sum(1 for h, ok, nov in zip(hashes, valid, novel)
              if ok and nov and seen[h] == 1)
    degree_hist = {}
    for s in samples:
        deg = np.zeros(s.n, dtype=int)
        for i, j, _ in s.edge_list():
            deg[i] += 1
            deg[j] += 1
        for d in deg:
            degree_hist[int(d)] = degree_hist.get(int(d), 0) + 1
    return MetricsReport(
        validity=sum(valid) / total,
        uniqueness=len(set(hashes)) / total,
        novelty=sum(novel) / total,
        vun=vun / total,
        counts={"total": total, "valid": int(sum(valid)),
                "distinct": len(set(hashes)), "novel": int(sum(novel))},
        degree_histogram=degree_hist)
