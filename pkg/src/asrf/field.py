"""Spatially partitioned radiance field with two-pass volume rendering.

The scene footprint is split into a regular grid of tiles, one small NeRF
per tile; sample points are routed to the tile whose centroid is nearest
in xy.  Rendering marches stratified coarse samples, resamples where the
coarse weights concentrate, and composites the merged set with the usual
transmittance quadrature.  The final segment to the far plane carries the
leftover transmittance into a constant background color, so the weights
plus residual transmittance always sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .diffcore import graph, nn
from .diffcore.graph import Node
from .diffcore.nn import MlpSpec, ParamStore
from .geom import Pose, Intrinsics
from . import geom


@dataclass(frozen=True)
class FieldConfig:
    nx: int = 2
    ny: int = 2
    trunk: tuple = (64, 64, 64, 64)
    color: tuple = (32, 32)
    pos_freqs: int = 10
    dir_freqs: int = 4
    appearance: bool = True
    emb_dim: int = 8

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("need at least a 1x1 tile grid")
        if self.appearance and self.emb_dim < 1:
            raise ValueError("appearance embeddings need emb_dim >= 1")


@dataclass(frozen=True)
class RenderConfig:
    near: float
    far: float
    n_coarse: int = 32
    n_fine: int = 32
    jitter: bool = True
    background: tuple = (0.70, 0.78, 0.90)
    opacity_valid_min: float = 0.05

    def __post_init__(self):
        if not 0 <= self.near < self.far:
            raise ValueError(f"require 0 <= near < far, got ({self.near}, {self.far})")
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")


@dataclass
class RenderResult:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    tvals: np.ndarray

    def depth_valid(self, threshold: float) -> np.ndarray:
        return self.opacity >= threshold


def _encode_values(x: np.ndarray, n_freq: int) -> np.ndarray:
    # mirrors nn.positional_encoding(include_input=True) op for op
    parts = [x]
    for k in range(n_freq):
        w = float(2.0 ** k * np.pi)
        xs = x * w
        parts.append(np.sin(xs))
        parts.append(np.cos(xs))
    return np.concatenate(parts, axis=x.ndim - 1) if len(parts) > 1 else parts[0]


def _mlp_values(spec: MlpSpec, store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    h = x
    for i in range(len(spec.widths)):
        h = h @ store[f"{prefix}/W{i}"].value + store[f"{prefix}/b{i}"].value
        if spec.activation == "relu":
            h = np.where(h > 0, h, 0.0)
    return h


class RadianceFieldGrid:
    def __init__(self, bounds, cfg: FieldConfig, n_images: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if not np.all(self.bounds[1] > self.bounds[0]):
            raise ValueError("bounds must satisfy hi > lo per axis")
        self.cfg = cfg
        self.n_images = int(n_images)
        self.store = ParamStore(dtype=dtype)

        lo, hi = self.bounds[0, :2], self.bounds[1, :2]
        tw = (hi - lo) / np.array([cfg.nx, cfg.ny])
        cx = lo[0] + (np.arange(cfg.nx) + 0.5) * tw[0]
        cy = lo[1] + (np.arange(cfg.ny) + 0.5) * tw[1]
        gx, gy = np.meshgrid(cx, cy)
        self.centroids = np.column_stack([gx.ravel(), gy.ravel()])  # (K, 2) row-major
        self.n_tiles = cfg.nx * cfg.ny

        pos_dim = 3 + 6 * cfg.pos_freqs
        dir_dim = 3 + 6 * cfg.dir_freqs
        color_in = cfg.trunk[-1] + dir_dim + (cfg.emb_dim if cfg.appearance else 0)
        self.trunk_spec = MlpSpec(in_dim=pos_dim, widths=tuple(cfg.trunk))
        self.color_spec = MlpSpec(in_dim=color_in, widths=tuple(cfg.color))
        for k in range(self.n_tiles):
            nn.init_mlp(self.store, f"t{k}/trunk", self.trunk_spec, rng)
            nn.init_linear(self.store, f"t{k}/sigma", cfg.trunk[-1], 1, rng,
                           bias=np.array([-4.0]))  # start translucent
            nn.init_mlp(self.store, f"t{k}/color", self.color_spec, rng)
            nn.init_linear(self.store, f"t{k}/rgb", cfg.color[-1], 3, rng)
        if cfg.appearance:
            self.store.add("appearance", np.zeros((max(self.n_images, 1), cfg.emb_dim)))

    # -- routing ------------------------------------------------------------

    def route(self, p: np.ndarray) -> np.ndarray:
        """Tile index per point by nearest centroid in xy; first index wins ties."""
        p = np.asarray(p, dtype=np.float64)
        single = p.ndim == 1
        xy = (p[None, :2] if single else p[:, :2])
        d2 = ((xy[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        k = np.argmin(d2, axis=1)
        return int(k[0]) if single else k

    # -- field evaluation -----------------------------------------------------

    def _normalize(self, pts: Node) -> Node:
        c = 0.5 * (self.bounds[1] + self.bounds[0])
        h = 0.5 * (self.bounds[1] - self.bounds[0])
        return (pts - graph.constant(c)) * graph.constant(1.0 / h)

    def forward_nodes(self, pts: Node, dirs: Node, img_ids=None) -> tuple:
        """(sigma (N,), rgb (N, 3)) at sample points with view directions."""
        n = pts.value.shape[0]
        tiles = self.route(pts.value)
        enc_p = nn.positional_encoding(self._normalize(pts), self.cfg.pos_freqs,
                                       include_input=True)
        enc_d = nn.positional_encoding(dirs, self.cfg.dir_freqs, include_input=True)
        emb = None
        if self.cfg.appearance:
            if img_ids is None:
                img_ids = np.zeros(n, dtype=np.int64)  # designated default row
            emb = graph.gather(self.store["appearance"], np.asarray(img_ids))

        parts_sigma, parts_rgb, order = [], [], []
        for k in range(self.n_tiles):
            sel = np.nonzero(tiles == k)[0]
            if sel.size == 0:
                continue
            p_k = graph.gather(enc_p, sel)
            d_k = graph.gather(enc_d, sel)
            h = nn.mlp_forward(self.trunk_spec, self.store, f"t{k}/trunk", p_k)
            sigma = graph.softplus(nn.linear(self.store, f"t{k}/sigma", h))
            cin = [h, d_k]
            if emb is not None:
                cin.append(graph.gather(emb, sel))
            ch = nn.mlp_forward(self.color_spec, self.store, f"t{k}/color",
                                graph.concat(cin, axis=1))
            rgb = graph.sigmoid(nn.linear(self.store, f"t{k}/rgb", ch))
            parts_sigma.append(sigma)
            parts_rgb.append(rgb)
            order.append(sel)

        order = np.concatenate(order)
        inv = np.empty_like(order)
        inv[order] = np.arange(n)
        sigma = graph.reshape(graph.gather(graph.concat(parts_sigma, axis=0), inv), (n,))
        rgb = graph.gather(graph.concat(parts_rgb, axis=0), inv)
        return sigma, rgb

    def forward_values(self, pts: np.ndarray, dirs: np.ndarray, img_ids=None,
                       sigma_only: bool = False) -> tuple:
        """Value-only twin of forward_nodes for proposal passes and eval renders.

        Mirrors the graph path op for op, so outputs agree bitwise with it.
        """
        n = pts.shape[0]
        tiles = self.route(pts)
        c = 0.5 * (self.bounds[1] + self.bounds[0])
        h = 0.5 * (self.bounds[1] - self.bounds[0])
        enc_p = _encode_values((pts - c) * (1.0 / h), self.cfg.pos_freqs)
        enc_d = None if sigma_only else _encode_values(dirs, self.cfg.dir_freqs)
        emb = None
        if self.cfg.appearance and not sigma_only:
            ids = np.zeros(n, dtype=np.int64) if img_ids is None else np.asarray(img_ids)
            emb = self.store["appearance"].value[ids]

        sigma = np.empty(n)
        rgb = None if sigma_only else np.empty((n, 3))
        for k in range(self.n_tiles):
            sel = np.nonzero(tiles == k)[0]
            if sel.size == 0:
                continue
            hk = _mlp_values(self.trunk_spec, self.store, f"t{k}/trunk", enc_p[sel])
            sraw = hk @ self.store[f"t{k}/sigma/W"].value + self.store[f"t{k}/sigma/b"].value
            sigma[sel] = np.logaddexp(0.0, sraw[:, 0])
            if sigma_only:
                continue
            cin = [hk, enc_d[sel]]
            if emb is not None:
                cin.append(emb[sel])
            ch = _mlp_values(self.color_spec, self.store, f"t{k}/color",
                             np.concatenate(cin, axis=1))
            craw = ch @ self.store[f"t{k}/rgb/W"].value + self.store[f"t{k}/rgb/b"].value
            rgb[sel] = graph._sigmoid_val(craw)
        return sigma, rgb

    def query(self, p, d, img_id=None) -> tuple:
        """Convenience single/batch query: (rgb, sigma) values."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        norms = np.linalg.norm(d, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("view directions must be unit vectors")
        ids = None if img_id is None else np.full(p.shape[0], img_id, dtype=np.int64)
        sigma, rgb = self.forward_nodes(graph.constant(p), graph.constant(d), ids)
        if p.shape[0] == 1:
            return rgb.value[0], float(sigma.value[0])
        return rgb.value, sigma.value

    # -- persistence ----------------------------------------------------------

    def to_state(self) -> dict:
        cfg = self.cfg
        state = {
            "meta/bounds": self.bounds,
            "meta/grid": np.array([cfg.nx, cfg.ny, cfg.pos_freqs, cfg.dir_freqs,
                                   float(cfg.appearance), cfg.emb_dim, self.n_images]),
            "meta/trunk": np.array(cfg.trunk, dtype=np.float64),
            "meta/color": np.array(cfg.color, dtype=np.float64),
        }
        for k, v in self.store.items():
            state[f"param/{k}"] = v.value
        return state

    @staticmethod
    def from_state(state: dict) -> "RadianceFieldGrid":
        g = state["meta/grid"]
        cfg = FieldConfig(nx=int(g[0]), ny=int(g[1]), pos_freqs=int(g[2]),
                          dir_freqs=int(g[3]), appearance=bool(g[4]), emb_dim=int(g[5]),
                          trunk=tuple(int(w) for w in state["meta/trunk"]),
                          color=tuple(int(w) for w in state["meta/color"]))
        grid = RadianceFieldGrid(state["meta/bounds"], cfg, n_images=int(g[6]),
                                 rng=np.random.default_rng(0))
        grid.store.load_state({k[len("param/"):]: v for k, v in state.items()
                               if k.startswith("param/")})
        return grid


# ---------------------------------------------------------------------------
# sampling


def sample_coarse(cfg: RenderConfig, n_rays: int, rng: np.random.Generator | None) -> np.ndarray:
    """(B, n_coarse) distances, one stratified sample per uniform bin."""
    edges = np.linspace(cfg.near, cfg.far, cfg.n_coarse + 1)
    lo = edges[:-1]
    width = np.diff(edges)
    if cfg.jitter and rng is not None:
        u = rng.random((n_rays, cfg.n_coarse))
    else:
        u = np.full((n_rays, cfg.n_coarse), 0.5)
    return lo[None, :] + u * width[None, :]


def sample_pdf(edges: np.ndarray, weights: np.ndarray, n_fine: int,
               rng: np.random.Generator | None) -> np.ndarray:
    """Inverse-CDF samples over bins defined by `edges`, (B, n_fine).

    Rows with zero total weight fall back to a uniform pdf.  With rng=None
    the draws are stratified midpoints, which makes rendering deterministic.
    """
    b, nb = weights.shape
    w = np.maximum(weights, 0.0)
    total = w.sum(axis=1, keepdims=True)
    uniform = total <= 0
    w = np.where(uniform, 1.0, w)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (b, n_fine)).copy()
    else:
        u = rng.random((b, n_fine))

    idx = np.clip((cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1, 0, nb - 1)
    rows = np.arange(b)[:, None]
    c_lo = cdf[rows, idx]
    c_hi = cdf[rows, idx + 1]
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-12)
    return edges[idx] + frac * (edges[idx + 1] - edges[idx])


def sample_coarse_fine(cfg: RenderConfig, coarse_t: np.ndarray,
                       coarse_weights: np.ndarray, rng) -> np.ndarray:
    """Merged, sorted coarse + fine sample distances (B, n_coarse + n_fine)."""
    if cfg.n_fine == 0:
        return np.sort(coarse_t, axis=1)
    edges = np.linspace(cfg.near, cfg.far, cfg.n_coarse + 1)
    fine = sample_pdf(edges, coarse_weights, cfg.n_fine, rng)
    return np.sort(np.concatenate([coarse_t, fine], axis=1), axis=1)


# ---------------------------------------------------------------------------
# compositing


def composite_weights_np(sigma: np.ndarray, tvals: np.ndarray, far: float) -> tuple:
    """Quadrature weights in plain numpy: (weights (B,S), residual T(far) (B,))."""
    delta = np.diff(tvals, axis=1)
    delta = np.concatenate([delta, far - tvals[:, -1:]], axis=1)
    tau = sigma * delta
    cs = np.cumsum(tau, axis=1)
    t_excl = np.exp(-(cs - tau))
    alpha = 1.0 - np.exp(-tau)
    return t_excl * alpha, np.exp(-cs[:, -1])


def composite_nodes(sigma: Node, rgb: Node, tvals: np.ndarray, cfg: RenderConfig) -> dict:
    """Differentiable compositing; sigma (B,S), rgb (B,S,3), tvals constant."""
    b, s = tvals.shape
    delta = np.concatenate([np.diff(tvals, axis=1), cfg.far - tvals[:, -1:]], axis=1)
    tau = sigma * graph.constant(delta)
    cs = graph.cumsum(tau, axis=1)
    t_excl = graph.exp(-(cs - tau))
    alpha = 1.0 - graph.exp(-tau)
    w = t_excl * alpha
    t_far = graph.exp(-cs[:, s - 1])
    bg = graph.constant(np.asarray(cfg.background, dtype=np.float64))
    color = graph.nsum(graph.reshape(w, (b, s, 1)) * rgb, axis=1) \
        + graph.reshape(t_far, (b, 1)) * bg
    depth = graph.nsum(w * graph.constant(tvals), axis=1)
    opacity = 1.0 - t_far
    return {"color": color, "depth": depth, "opacity": opacity, "weights": w}


# ---------------------------------------------------------------------------
# rendering


def render_rays_nodes(grid: RadianceFieldGrid, origins, dirs, cfg: RenderConfig,
                      img_ids=None, rng: np.random.Generator | None = None,
                      field_fn=None) -> tuple:
    """Render a batch of rays, keeping the graph; origins/dirs may be Nodes.

    Returns (outputs dict of Nodes, tvals ndarray).  The coarse proposal
    pass runs on detached values; only the merged final pass builds graph
    state, so gradients flow through the field and through ray geometry
    but never through sample placement.
    """
    o_node = origins if isinstance(origins, Node) else graph.constant(np.asarray(origins, dtype=np.float64))
    d_node = dirs if isinstance(dirs, Node) else graph.constant(np.asarray(dirs, dtype=np.float64))
    b = o_node.value.shape[0]

    coarse_t = sample_coarse(cfg, b, rng)
    o_det = o_node.value
    d_det = d_node.value
    pts = o_det[:, None, :] + coarse_t[:, :, None] * d_det[:, None, :]
    if field_fn is None:
        sigma_c = grid.forward_values(pts.reshape(-1, 3), None, sigma_only=True)[0]
    else:
        rep = np.repeat(np.arange(b), cfg.n_coarse)
        ids = None if img_ids is None else np.asarray(img_ids)[rep]
        sigma_c = field_fn(graph.constant(pts.reshape(-1, 3)),
                           graph.constant(d_det[rep]), ids)[0].value
    w_c, _ = composite_weights_np(sigma_c.reshape(b, cfg.n_coarse), coarse_t, cfg.far)

    tvals = sample_coarse_fine(cfg, coarse_t, w_c, rng)
    return render_fixed_nodes(grid, o_node, d_node, tvals, cfg, img_ids, field_fn), tvals


def render_fixed_nodes(grid: RadianceFieldGrid, o_node: Node, d_node: Node,
                       tvals: np.ndarray, cfg: RenderConfig, img_ids=None,
                       field_fn=None) -> dict:
    """Differentiable compositing at fixed sample distances."""
    fn = field_fn if field_fn is not None else grid.forward_nodes
    b, s = tvals.shape
    rep = np.repeat(np.arange(b), s)
    ids = None if img_ids is None else np.asarray(img_ids)[rep]
    tv = graph.constant(tvals.reshape(b, s, 1))
    o3 = graph.reshape(o_node, (b, 1, 3))
    d3 = graph.reshape(d_node, (b, 1, 3))
    pts = graph.reshape(o3 + tv * d3, (b * s, 3))
    dirs_flat = graph.gather(d_node, rep)
    sigma, rgb = fn(pts, dirs_flat, ids)
    return composite_nodes(graph.reshape(sigma, (b, s)), graph.reshape(rgb, (b, s, 3)),
                           tvals, cfg)


def render_rays(grid: RadianceFieldGrid, origins: np.ndarray, dirs: np.ndarray,
                cfg: RenderConfig, img_ids=None, rng=None, field_fn=None) -> RenderResult:
    """Graph-free render for eval; matches the node path bitwise.

    An injected field_fn forces the node path, since custom fields only
    exist in graph form.
    """
    if field_fn is not None:
        out, tvals = render_rays_nodes(grid, origins, dirs, cfg, img_ids, rng, field_fn)
        return RenderResult(color=out["color"].value, depth=out["depth"].value,
                            opacity=out["opacity"].value, weights=out["weights"].value,
                            tvals=tvals)

    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    b = o.shape[0]
    coarse_t = sample_coarse(cfg, b, rng)
    pts = o[:, None, :] + coarse_t[:, :, None] * d[:, None, :]
    sigma_c = grid.forward_values(pts.reshape(-1, 3), None, sigma_only=True)[0]
    w_c, _ = composite_weights_np(sigma_c.reshape(b, cfg.n_coarse), coarse_t, cfg.far)

    tvals = sample_coarse_fine(cfg, coarse_t, w_c, rng)
    s = tvals.shape[1]
    rep = np.repeat(np.arange(b), s)
    ids = None if img_ids is None else np.asarray(img_ids)[rep]
    pts = (o[:, None, :] + tvals[:, :, None] * d[:, None, :]).reshape(b * s, 3)
    sigma, rgb = grid.forward_values(pts, d[rep], ids)
    w, t_far = composite_weights_np(sigma.reshape(b, s), tvals, cfg.far)
    bg = np.asarray(cfg.background, dtype=np.float64)
    color = (w.reshape(b, s, 1) * rgb.reshape(b, s, 3)).sum(axis=1) + t_far.reshape(b, 1) * bg
    depth = (w * tvals).sum(axis=1)
    return RenderResult(color=color, depth=depth, opacity=1.0 - t_far,
                        weights=w, tvals=tvals)


def render_ray(grid: RadianceFieldGrid, ray: geom.Ray, cfg: RenderConfig,
               img_id=None, rng=None) -> RenderResult:
    ids = None if img_id is None else np.array([img_id])
    res = render_rays(grid, ray.origin[None, :], ray.direction[None, :], cfg, ids, rng)
    return RenderResult(color=res.color[0], depth=float(res.depth[0]),
                        opacity=float(res.opacity[0]), weights=res.weights[0],
                        tvals=res.tvals[0])


def render_image(grid: RadianceFieldGrid, pose: Pose, k: Intrinsics, cfg: RenderConfig,
                 img_id=None, chunk: int = 4096) -> RenderResult:
    """Deterministic full-frame render (no jitter, midpoint fine samples)."""
    o, d = geom.camera_rays(pose, k)
    cfg_eval = RenderConfig(near=cfg.near, far=cfg.far, n_coarse=cfg.n_coarse,
                            n_fine=cfg.n_fine, jitter=False, background=cfg.background,
                            opacity_valid_min=cfg.opacity_valid_min)
    n = d.shape[0]
    colors, depths, opac = [], [], []
    for i in range(0, n, chunk):
        dd = d[i:i + chunk]
        oo = np.broadcast_to(o, dd.shape).copy()
        ids = None if img_id is None else np.full(dd.shape[0], img_id, dtype=np.int64)
        res = render_rays(grid, oo, dd, cfg_eval, ids, rng=None)
        colors.append(res.color)
        depths.append(res.depth)
        opac.append(res.opacity)
    h, w = k.height, k.width
    return RenderResult(color=np.concatenate(colors).reshape(h, w, 3),
                        depth=np.concatenate(depths).reshape(h, w),
                        opacity=np.concatenate(opac).reshape(h, w),
                        weights=np.zeros(0), tvals=np.zeros(0))
