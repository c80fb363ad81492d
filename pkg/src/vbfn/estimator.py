"""Scikit-learn style estimator facade over the training and sampling loops.

``VBFNGenerator`` follows the fit/sample contract of sklearn's generative
estimators (fit stores learned state on trailing-underscore attributes,
``get_params``/``set_params``/``clone`` work as usual), so it composes with
the surrounding ecosystem while the numerical core stays in the library
modules.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator

from .flow import Schedule
from .graphs import Dataset, GraphSample, infer_meta, read_dataset
from .pipeline import PrecisionSettings, fit_params, sample_graphs
from .predictor import PredictorConfig
from .solver import SolverConfig
from .validation import check_choice


def _as_dataset(graphs):
    if isinstance(graphs, str):
        return read_dataset(graphs)
    if isinstance(graphs, Dataset):
        return graphs
    samples = list(graphs)
    if not samples:
        raise ValueError("fit needs at least one graph")
    records = []
    for s in samples:
        if not isinstance(s, GraphSample):
            raise TypeError(f"expected GraphSample, got {type(s).__name__}")
        rec = {"n": s.n, "edges": s.edge_list()}
        if s.continuous_nodes:
            rec["node_coords"] = s.node_classes[:s.n].tolist()
        else:
            rec["node_classes"] = s.node_classes[:s.n].tolist()
        records.append(rec)
    return Dataset(samples=samples, meta=infer_meta(records))


class VBFNGenerator(BaseEstimator):
    """Graph generator trained by structured-precision belief flows.

    Parameters mirror the run configuration: noise schedule, coupling
    strengths and floors of the precision geometry, solver settings, the
    denoiser size, and the optimizer.  ``fit`` trains the denoiser on a
    sequence of GraphSamples (or a dataset path); ``sample`` generates new
    graphs from the learned state.
    """

    def __init__(self, sigma1_node=0.2, sigma1_edge=0.2, sample_steps=1000,
                 t_min=1e-4, obs_mode="diag_prior", lambda_x=0.2, lambda_a=0.2,
                 eps=1e-2, eps_obs=1e-2, solver="cg", cg_tol=1e-6,
                 cg_max_iter=50, preconditioner="jacobi", hidden_width=64,
                 depth=2, time_embed_dim=16, sigma_floor=1e-4,
                 train_steps=2000, batch_size=64, lr=1e-4, weight_decay=1e-12,
                 clip_norm=10000.0, loss_convention="algorithmic",
                 per_graph_t=False, eps_prob=1e-12, random_state=0):
        self.sigma1_node = sigma1_node
        self.sigma1_edge = sigma1_edge
        self.sample_steps = sample_steps
        self.t_min = t_min
        self.obs_mode = obs_mode
        self.lambda_x = lambda_x
        self.lambda_a = lambda_a
        self.eps = eps
        self.eps_obs = eps_obs
        self.solver = solver
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.preconditioner = preconditioner
        self.hidden_width = hidden_width
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.sigma_floor = sigma_floor
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.loss_convention = loss_convention
        self.per_graph_t = per_graph_t
        self.eps_prob = eps_prob
        self.random_state = random_state

    def _components(self, meta):
        schedule = Schedule(sigma1_node=self.sigma1_node,
                            sigma1_edge=self.sigma1_edge,
                            steps=int(self.sample_steps), t_min=self.t_min)
        precision = PrecisionSettings(obs_mode=self.obs_mode,
                                      lambda_x=self.lambda_x,
                                      lambda_a=self.lambda_a,
                                      eps=self.eps, eps_obs=self.eps_obs)
        solver_cfg = SolverConfig(method=self.solver, cg_tol=self.cg_tol,
                                  cg_max_iter=int(self.cg_max_iter),
                                  preconditioner=self.preconditioner)
        pred_config = PredictorConfig(hidden_width=int(self.hidden_width),
                                      depth=int(self.depth),
                                      time_embed_dim=int(self.time_embed_dim),
                                      node_channel_kind=meta.node_channel,
                                      sigma_floor=self.sigma_floor)
        return schedule, precision, solver_cfg, pred_config

    def fit(self, graphs, y=None):
        """Train the denoiser; ``graphs`` is a sequence of GraphSamples,
        a Dataset, or a path to a JSON-lines dataset."""
        check_choice("loss_convention", self.loss_convention,
                     ("algorithmic", "continuous"))
        if not isinstance(self.random_state, numbers.Integral):
            raise ValueError("random_state must be an integer seed")
        dataset = _as_dataset(graphs)
        meta = dataset.meta
        schedule, precision, solver_cfg, pred_config = self._components(meta)
        result = fit_params(
            list(dataset), meta, schedule=schedule, precision=precision,
            solver_cfg=solver_cfg, pred_config=pred_config,
            seed=int(self.random_state), steps=int(self.train_steps),
            batch_size=int(self.batch_size), lr=self.lr,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm,
            convention=self.loss_convention, eps_prob=self.eps_prob,
            per_graph_t=self.per_graph_t)
        self.meta_ = meta
        self.params_ = result.checkpoint.params
        self.histogram_ = result.checkpoint.histogram
        self.loss_history_ = np.asarray(result.losses)
        self.solver_stats_ = result.stats
        return self

    def sample(self, n_samples=1, random_state=None, steps=None):
        """Generate graphs from the fitted model."""
        if not hasattr(self, "params_"):
            raise RuntimeError("this VBFNGenerator instance is not fitted yet")
        seed = int(self.random_state if random_state is None else random_state)
        schedule, precision, solver_cfg, pred_config = self._components(self.meta_)
        return sample_graphs(
            self.params_, self.meta_, schedule=schedule, precision=precision,
            solver_cfg=solver_cfg, pred_config=pred_config,
            histogram=self.histogram_, count=int(n_samples), seed=seed,
            steps=steps or int(self.sample_steps), eps_prob=self.eps_prob)
