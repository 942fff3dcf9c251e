"""Implicit trajectory model: timestamp -> SE(3) pose.

A normalized timestamp indexes a stack of 1-D feature grids at growing
resolutions; each level is read with quadratic three-node interpolation
and the concatenated features are decoded by an MLP into a translation
and a unit quaternion.  Translation velocity comes from a forward-mode
derivative of the same graph, so it can be supervised directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .diffcore import graph, nn
from .diffcore.graph import Node
from .diffcore.nn import MlpSpec, ParamStore
from .diffcore.optim import AdamState, adam_step
from .geom import Pose

_PI1 = 2654435761
_PI2 = 805459861


@dataclass
class TimePoseConfig:
    levels: int = 8
    base_resolution: int = 16
    growth: float = 2.0
    n_features: int = 2
    hashed: bool = False
    table_size: int = 4096
    hidden: tuple = (128, 128, 128, 128)
    skip_at: tuple = (2,)
    iters: int = 3000
    lr: float = 3e-3
    lr_decay: float = 0.05          # final lr fraction, exponential schedule
    lambda_speed: float = 0.01
    holdout_every: int = 10         # every k-th sample held out; 0 disables
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_resolution < 1:
            raise ValueError("levels and base_resolution must be >= 1")
        if self.growth <= 1.0:
            raise ValueError("growth must exceed 1")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")


@dataclass
class HashLevel:
    """One grid level; rows hold features for integer nodes -1 .. R+1."""

    resolution: int
    n_features: int
    hashed: bool
    table: Node = None
    clamp_events: int = 0

    @property
    def n_rows(self) -> int:
        return self.table.value.shape[0]

    def node_rows(self, n: np.ndarray) -> np.ndarray:
        """Table row for integer node index n in [-1, resolution+1]."""
        i = n + 1
        if not self.hashed:
            return i
        return ((i * _PI1) ^ _PI2) % self.n_rows


def _interp_weights(u: Node) -> tuple:
    """Quadratic Lagrange weights on nodes (n-1, n, n+1) at offset u in [0, 1)."""
    half = 0.5
    w_m = (u * (u - 1.0)) * half
    w_0 = 1.0 - u * u
    w_p = (u * (u + 1.0)) * half
    return w_m, w_0, w_p


def hash_interp(level: HashLevel, t_norm) -> np.ndarray:
    """Interpolated features at normalized timestamp(s); values only."""
    t = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    out = hash_interp_nodes(level, graph.constant(t))
    feats = out.value
    return feats[0] if np.isscalar(t_norm) or np.ndim(t_norm) == 0 else feats


def hash_interp_nodes(level: HashLevel, t_norm: Node) -> Node:
    """Differentiable read of one level at normalized timestamps (B,) -> (B, F)."""
    r = level.resolution
    tv = t_norm.value
    out_of_range = (tv < -1e-9) | (tv > 1.0 + 1e-9)
    if out_of_range.any():
        level.clamp_events += int(out_of_range.sum())
        t_norm = graph.constant(np.clip(tv, 0.0, 1.0).astype(tv.dtype))
    x = t_norm * float(r)
    # clip keeps all three taps inside the padded node range [-1, r+1];
    # boundary fp noise then only shifts u infinitesimally outside [0, 1)
    n = np.clip(np.floor(x.value), 0, r).astype(np.int64)
    u = x - graph.constant(n.astype(x.value.dtype))
    w_m, w_0, w_p = _interp_weights(u)
    g_m = graph.gather(level.table, level.node_rows(n - 1))
    g_0 = graph.gather(level.table, level.node_rows(n))
    g_p = graph.gather(level.table, level.node_rows(n + 1))
    b = tv.shape[0]
    w_m = graph.reshape(w_m, (b, 1))
    w_0 = graph.reshape(w_0, (b, 1))
    w_p = graph.reshape(w_p, (b, 1))
    return w_m * g_m + w_0 * g_0 + w_p * g_p


class TimePoseModel:
    def __init__(self, cfg: TimePoseConfig, t_min: float, t_max: float,
                 rng: np.random.Generator, dtype=np.float64,
                 out_center=None, out_scale=None):
        if not t_max > t_min:
            raise ValueError("need t_max > t_min")
        self.cfg = cfg
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.store = ParamStore(dtype=dtype)
        self.levels: list[HashLevel] = []
        self.clamp_events = 0
        self.degenerate_events = 0
        self.out_center = np.zeros(3) if out_center is None else np.asarray(out_center, dtype=np.float64)
        self.out_scale = np.ones(3) if out_scale is None else np.asarray(out_scale, dtype=np.float64)

        for l in range(cfg.levels):
            r = int(round(cfg.base_resolution * cfg.growth ** l))
            dense_rows = r + 3
            hashed = cfg.hashed and dense_rows > cfg.table_size
            rows = cfg.table_size if hashed else dense_rows
            table = self.store.add(f"grid/level{l}",
                                   rng.uniform(-1e-4, 1e-4, size=(rows, cfg.n_features)))
            self.levels.append(HashLevel(r, cfg.n_features, hashed, table))

        in_dim = cfg.levels * cfg.n_features
        self.decoder_spec = MlpSpec(in_dim=in_dim, widths=tuple(cfg.hidden),
                                    skip_at=tuple(cfg.skip_at), skip_dim=1)
        nn.init_mlp(self.store, "decoder", self.decoder_spec, rng)
        nn.init_linear(self.store, "head_trans", cfg.hidden[-1], 3, rng)
        nn.init_linear(self.store, "head_rot", cfg.hidden[-1], 4, rng,
                       w_scale=1e-4, bias=np.array([1.0, 0.0, 0.0, 0.0]))
        self.store.add("s_trans", np.zeros(()))
        self.store.add("s_rot", np.zeros(()))

    @property
    def span(self) -> float:
        return self.t_max - self.t_min

    def _clamp_times(self, t: np.ndarray) -> np.ndarray:
        out = np.clip(t, self.t_min, self.t_max)
        n = int(np.sum((t < self.t_min) | (t > self.t_max)))
        if n:
            self.clamp_events += n
        return out

    def forward_nodes(self, t: np.ndarray) -> tuple:
        """(translation (B,3), unit quaternion (B,4), input time node)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        t_node = graph.constant(self._clamp_times(t))
        t_norm = (t_node - self.t_min) * (1.0 / self.span)
        feats = [hash_interp_nodes(lv, t_norm) for lv in self.levels]
        v = graph.concat(feats, axis=1)
        skip = graph.reshape(t_norm, (t.shape[0], 1))
        h = nn.mlp_forward(self.decoder_spec, self.store, "decoder", v, skip=skip)
        x = nn.linear(self.store, "head_trans", h)
        x = x * graph.constant(self.out_scale) + graph.constant(self.out_center)
        q_raw = nn.linear(self.store, "head_rot", h)
        norms_v = np.linalg.norm(q_raw.value, axis=1, keepdims=True)
        bad = norms_v < 1e-8
        if bad.any():
            self.degenerate_events += int(bad.sum())
            q_raw = q_raw + graph.constant(bad * np.array([1.0, 0.0, 0.0, 0.0]))
        q_norm = graph.sqrt(graph.nsum(q_raw * q_raw, axis=1, keepdims=True))
        q = q_raw / q_norm
        return x, q, t_node

    def forward(self, t: float) -> Pose:
        x, q, _ = self.forward_nodes(np.array([float(t)]))
        return Pose(q.value[0], x.value[0])

    def velocity_nodes(self, t: np.ndarray) -> Node:
        """Translational velocity dx/dt (B,3), differentiable w.r.t. parameters."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x, _, t_node = self.forward_nodes(t)
        (tan,) = graph.jvp([x], t_node, np.ones_like(t_node.value))
        if tan is None:
            return graph.constant(np.zeros_like(x.value))
        return graph.broadcast_to(tan, x.value.shape) if tan.value.shape != x.value.shape else tan

    def velocity(self, t: float) -> np.ndarray:
        return self.velocity_nodes(np.array([float(t)])).value[0]

    # -- persistence -------------------------------------------------------

    def to_state(self) -> dict:
        cfg = self.cfg
        state = {
            "meta/t_range": np.array([self.t_min, self.t_max]),
            "meta/grid": np.array([cfg.levels, cfg.base_resolution, cfg.growth,
                                   cfg.n_features, float(cfg.hashed), cfg.table_size]),
            "meta/hidden": np.array(cfg.hidden, dtype=np.float64),
            "meta/skip_at": np.array(cfg.skip_at, dtype=np.float64),
            "meta/out_center": self.out_center,
            "meta/out_scale": self.out_scale,
        }
        for k, v in self.store.items():
            state[f"param/{k}"] = v.value
        return state

    @staticmethod
    def from_state(state: dict) -> "TimePoseModel":
        g = state["meta/grid"]
        cfg = TimePoseConfig(levels=int(g[0]), base_resolution=int(g[1]), growth=float(g[2]),
                             n_features=int(g[3]), hashed=bool(g[4]), table_size=int(g[5]),
                             hidden=tuple(int(w) for w in state["meta/hidden"]),
                             skip_at=tuple(int(s) for s in state["meta/skip_at"]))
        t0, t1 = state["meta/t_range"]
        model = TimePoseModel(cfg, float(t0), float(t1), np.random.default_rng(0),
                              out_center=state["meta/out_center"],
                              out_scale=state["meta/out_scale"])
        model.store.load_state({k[len("param/"):]: v for k, v in state.items()
                                if k.startswith("param/")})
        return model


# ---------------------------------------------------------------------------
# losses


def pose_loss(model: TimePoseModel, t: np.ndarray, x_gt: np.ndarray, q_gt: np.ndarray) -> tuple:
    """Uncertainty-weighted pose regression loss.

    Translation and rotation MSEs (component sum, batch mean) are combined
    with learned log-variances s:  L_t*exp(-s_t) + s_t + L_r*exp(-s_r) + s_r.
    Ground-truth quaternions are sign-aligned to the predictions so the
    double cover cannot inflate the rotation term.
    Returns (total, {"trans": float, "rot": float}).
    """
    x_hat, q_hat, _ = model.forward_nodes(t)
    q_gt = np.asarray(q_gt, dtype=np.float64)
    dots = np.sum(q_gt * q_hat.value, axis=1, keepdims=True)
    q_aligned = np.where(dots < 0, -q_gt, q_gt)
    dt = x_hat - graph.constant(np.asarray(x_gt, dtype=np.float64))
    dq = q_hat - graph.constant(q_aligned)
    l_t = graph.nmean(graph.nsum(dt * dt, axis=1))
    l_r = graph.nmean(graph.nsum(dq * dq, axis=1))
    s_t, s_r = model.store["s_trans"], model.store["s_rot"]
    total = l_t * graph.exp(-s_t) + s_t + l_r * graph.exp(-s_r) + s_r
    return total, {"trans": float(l_t.value), "rot": float(l_r.value)}


def speed_loss(model: TimePoseModel, t: np.ndarray, v_gt: np.ndarray) -> Node:
    """MSE between supervised translational velocity and d x_hat / d t."""
    v_gt = np.asarray(v_gt, dtype=np.float64)
    if v_gt.shape != (np.size(t), 3):
        raise ValueError(f"velocities must be ({np.size(t)}, 3), got {v_gt.shape}")
    v_hat = model.velocity_nodes(t)
    dv = v_hat - graph.constant(v_gt)
    return graph.nmean(graph.nsum(dv * dv, axis=1))


def central_velocities(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Finite-difference velocities: central interior, one-sided endpoints."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    v[0] = (x[1] - x[0]) / (t[1] - t[0])
    v[-1] = (x[-1] - x[-2]) / (t[-1] - t[-2])
    return v


# ---------------------------------------------------------------------------
# fitting


def _pose_errors(model: TimePoseModel, t: np.ndarray, poses: list) -> tuple:
    rots, trans = [], []
    for ti, p in zip(t, poses):
        rot, tr = geom.pose_error(model.forward(ti), p)
        rots.append(rot)
        trans.append(tr)
    return float(np.mean(rots)), float(np.mean(trans))


def fit_timepose(samples: list, cfg: TimePoseConfig) -> tuple:
    """Fit the trajectory model to (timestamp, Pose) samples.

    Every cfg.holdout_every-th sample is excluded from training and used
    to report interpolation quality.  Returns (model, report dict).
    """
    if len(samples) < 3:
        raise ValueError(f"need at least 3 samples, got {len(samples)}")
    t = np.array([s[0] for s in samples], dtype=np.float64)
    if not np.all(np.diff(t) > 0):
        raise ValueError("timestamps must be strictly increasing")
    poses = [s[1] for s in samples]
    x = np.stack([p.x for p in poses])
    q = np.stack([p.q for p in poses])
    v = central_velocities(t, x)

    idx = np.arange(len(samples))
    if cfg.holdout_every and cfg.holdout_every > 1:
        hold = idx[cfg.holdout_every // 2::cfg.holdout_every]
    else:
        hold = np.array([], dtype=int)
    train = np.setdiff1d(idx, hold)

    center = 0.5 * (x[train].max(axis=0) + x[train].min(axis=0))
    scale = np.maximum(0.5 * (x[train].max(axis=0) - x[train].min(axis=0)), 1e-2)
    rng = np.random.default_rng(cfg.seed)
    model = TimePoseModel(cfg, float(t.min()), float(t.max()), rng,
                          out_center=center, out_scale=scale)

    tt, xt, qt, vt = t[train], x[train], q[train], v[train]
    opt = AdamState(lr=cfg.lr)
    curve = []
    for i in range(cfg.iters):
        opt.lr = cfg.lr * (cfg.lr_decay ** (i / max(cfg.iters - 1, 1)))
        model.store.zero_grad()
        total, parts = pose_loss(model, tt, xt, qt)
        if cfg.lambda_speed > 0:
            total = total + cfg.lambda_speed * speed_loss(model, tt, vt)
        graph.backward(total)
        adam_step(model.store, opt)
        if i % cfg.log_every == 0 or i == cfg.iters - 1:
            curve.append({"step": i, "total": float(total.value),
                          "trans_mse": parts["trans"], "rot_mse": parts["rot"]})

    report = {"n_train": int(train.size), "n_holdout": int(hold.size), "curve": curve}
    report["train_rot_deg"], report["train_trans_m"] = _pose_errors(model, tt, [poses[i] for i in train])
    if hold.size:
        report["holdout_rot_deg"], report["holdout_trans_m"] = _pose_errors(
            model, t[hold], [poses[i] for i in hold])
    return model, report


def linear_interp_pose(keyframes: list, t: float) -> Pose:
    """Piecewise lerp/slerp between (timestamp, Pose) keyframes; clamps outside."""
    if not keyframes:
        raise ValueError("no keyframes")
    times = np.array([k[0] for k in keyframes], dtype=np.float64)
    if not np.all(np.diff(times) > 0):
        raise ValueError("keyframe timestamps must be strictly increasing")
    if t <= times[0]:
        return Pose(keyframes[0][1].q, keyframes[0][1].x)
    if t >= times[-1]:
        return Pose(keyframes[-1][1].q, keyframes[-1][1].x)
    j = int(np.searchsorted(times, t, side="right"))
    t0, p0 = keyframes[j - 1]
    t1, p1 = keyframes[j]
    a = (t - t0) / (t1 - t0)
    return Pose(geom.slerp(p0.q, p1.q, a), (1.0 - a) * p0.x + a * p1.x)
