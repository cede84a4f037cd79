"""Learned scattering fields: a fully-connected network maps an encoded
position to density and, joined with encoded light/view directions, to a
scatter fraction. Training fits a coarse/fine pair of networks to rendered
frames by backpropagating through the compositing chain; everything runs on
plain numpy arrays with hand-written gradients.

The density head only ever sees the position branch, so view invariance of
density is structural rather than learned.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .fields import ScatteringField
from .geom import Aabb, Rng, key_uniforms, mix_key, stratified_samples_from_keys

__all__ = [
    "Adam",
    "Mlp",
    "MlpConfig",
    "MlpField",
    "composite_backward",
    "composite_forward",
    "fit",
    "forward_gaps",
    "load_checkpoint",
    "load_optimizer",
    "positional_encoding",
    "prepare_training_rays",
    "resample_from_weights",
    "save_checkpoint",
    "save_optimizer",
]

_TAG_TRAIN = 21
_TAG_BATCH = 22
_TAG_COARSE = 23
_TAG_FINE = 24
_TAG_INIT = 25

_CHECKPOINT_MAGIC = b"VTNF"
_CHECKPOINT_VERSION = 1

# forward blocks are capped so field evaluation inside the renderer never
# materializes huge activation matrices
_EVAL_BLOCK = 131072


def positional_encoding(x, n_freqs: int, include_input: bool) -> np.ndarray:
    """Frequency features [x?, sin(2^0 pi x), cos(2^0 pi x), sin(2^1 pi x), ...].

    Input (..., 3) maps to (..., 3 * (include_input + 2 * n_freqs)).
    """
    x = np.asarray(x)
    parts = [x] if include_input else []
    for k in range(n_freqs):
        scaled = (2.0**k * np.pi) * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def encoding_dim(n_freqs: int, include_input: bool) -> int:
    return 3 * ((1 if include_input else 0) + 2 * n_freqs)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of one network. The defaults are the full-scale layout;
    tests and quick experiments shrink every knob."""

    pos_freqs: int = 10
    dir_freqs: int = 4
    include_input: bool = True
    trunk_depth: int = 8
    trunk_width: int = 256
    scatter_depth: int = 4
    scatter_width: int = 128
    skip_layer: int = 4
    sigmoid_gain: float = 1.2
    zero_light_dir: bool = False  # ablation: the light direction input is zeroed

    def __post_init__(self):
        if self.trunk_depth < 1 or self.scatter_depth < 0:
            raise ValueError("network depth out of range")
        if not (0 < self.skip_layer < self.trunk_depth) and self.trunk_depth > 1:
            raise ValueError("skip_layer must be inside the trunk")
        if self.sigmoid_gain < 1.0:
            raise ValueError("sigmoid_gain below 1 cannot reach the value range ends")

    @property
    def pos_dim(self) -> int:
        return encoding_dim(self.pos_freqs, self.include_input)

    @property
    def dir_dim(self) -> int:
        return encoding_dim(self.dir_freqs, False)


class Mlp:
    """Coarse or fine network with hand-written forward/backward.

    Parameters live in self.params, a flat list alternating weights and
    biases in a fixed order: trunk layers, density head, scatter hidden
    layers, scatter output. Glorot-uniform init, seeded and deterministic.
    """

    def __init__(self, config: MlpConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: List[np.ndarray] = []
        rng = Rng(seed)
        dims = self._layer_dims()
        for i, (fan_in, fan_out) in enumerate(dims):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            u = key_uniforms(rng.derive(_TAG_INIT, i).key, fan_in * fan_out)
            w = ((u * 2.0 - 1.0) * limit).reshape(fan_in, fan_out)
            self.params.append(w.astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))

    def _layer_dims(self) -> List[Tuple[int, int]]:
        c = self.config
        dims = []
        for i in range(c.trunk_depth):
            if i == 0:
                fan_in = c.pos_dim
            elif i == c.skip_layer:
                fan_in = c.trunk_width + c.pos_dim
            else:
                fan_in = c.trunk_width
            dims.append((fan_in, c.trunk_width))
        dims.append((c.trunk_width, 1))  # density head
        for i in range(c.scatter_depth):
            fan_in = c.trunk_width + 2 * c.dir_dim if i == 0 else c.scatter_width
            dims.append((fan_in, c.scatter_width))
        scatter_in = c.scatter_width if c.scatter_depth else c.trunk_width + 2 * c.dir_dim
        dims.append((scatter_in, 3))
        return dims

    def parameters(self) -> List[np.ndarray]:
        return self.params

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.config = self.config
        dup.dtype = self.dtype
        dup.params = [p.copy() for p in self.params]
        return dup

    # forward --------------------------------------------------------------

    def _trunk(self, enc_p, cache: Optional[list]):
        c = self.config
        h = enc_p
        for i in range(c.trunk_depth):
            if i == c.skip_layer and i > 0:
                h = np.concatenate([h, enc_p], axis=1)
            w, b = self.params[2 * i], self.params[2 * i + 1]
            pre = h @ w + b
            out = np.maximum(pre, 0.0)
            if cache is not None:
                cache.append((h, out))
            h = out
        return h

    def density(self, positions) -> np.ndarray:
        """Density only; skips the scatter branch entirely."""
        out = np.empty(len(positions), dtype=self.dtype)
        for lo in range(0, len(positions), _EVAL_BLOCK):
            hi = min(lo + _EVAL_BLOCK, len(positions))
            enc_p = positional_encoding(
                np.asarray(positions[lo:hi], dtype=self.dtype),
                self.config.pos_freqs,
                self.config.include_input,
            )
            trunk = self._trunk(enc_p, None)
            wd, bd = self._density_slot()
            out[lo:hi] = _softplus(trunk @ wd + bd)[:, 0]
        return out

    def _density_slot(self):
        i = 2 * self.config.trunk_depth
        return self.params[i], self.params[i + 1]

    def _scatter_slots(self):
        base = 2 * self.config.trunk_depth + 2
        hidden = [
            (self.params[base + 2 * i], self.params[base + 2 * i + 1])
            for i in range(self.config.scatter_depth)
        ]
        j = base + 2 * self.config.scatter_depth
        return hidden, (self.params[j], self.params[j + 1])

    def forward(
        self, positions, light_dirs, view_dirs, want_cache: bool = False
    ) -> Tuple[np.ndarray, np.ndarray, Optional[dict]]:
        """(density (N,), scatter (N, 3), cache) for flat (N, 3) inputs."""
        c = self.config
        dt = self.dtype
        pos = np.asarray(positions, dtype=dt)
        ld = np.zeros_like(pos) if c.zero_light_dir else np.asarray(light_dirs, dtype=dt)
        vd = np.asarray(view_dirs, dtype=dt)

        enc_p = positional_encoding(pos, c.pos_freqs, c.include_input)
        enc_l = positional_encoding(ld, c.dir_freqs, False)
        enc_v = positional_encoding(vd, c.dir_freqs, False)

        trunk_cache: Optional[list] = [] if want_cache else None
        trunk = self._trunk(enc_p, trunk_cache)

        wd, bd = self._density_slot()
        sigma_pre = trunk @ wd + bd
        sigma = _softplus(sigma_pre)[:, 0]

        hidden, (wo, bo) = self._scatter_slots()
        h = np.concatenate([trunk, enc_l, enc_v], axis=1)
        scatter_cache: Optional[list] = [] if want_cache else None
        for w, b in hidden:
            pre = h @ w + b
            out = np.maximum(pre, 0.0)
            if scatter_cache is not None:
                scatter_cache.append((h, out))
            h = out
        z = h @ wo + bo
        s = _sigmoid(z)
        raw = c.sigmoid_gain * (s - 0.5) + 0.5
        rho = np.clip(raw, 0.0, 1.0)

        cache = None
        if want_cache:
            cache = {
                "trunk": trunk_cache,
                "trunk_out": trunk,
                "scatter": scatter_cache,
                "scatter_in": h,
                "sigma_pre": sigma_pre,
                "s": s,
                "open": (raw > 0.0) & (raw < 1.0),
            }
        return sigma, rho, cache

    # backward ---------------------------------------------------------------

    def backward(self, cache: dict, d_sigma, d_rho) -> List[np.ndarray]:
        """Parameter gradients (same layout as self.params) given upstream
        gradients for density (N,) and scatter (N, 3)."""
        c = self.config
        grads = [np.zeros_like(p) for p in self.params]

        # scatter branch
        s = cache["s"]
        dz = (
            np.asarray(d_rho, dtype=self.dtype)
            * cache["open"]
            * (c.sigmoid_gain * s * (1.0 - s))
        )
        hidden, _ = self._scatter_slots()
        j = 2 * c.trunk_depth + 2 + 2 * c.scatter_depth
        grads[j] = cache["scatter_in"].T @ dz
        grads[j + 1] = dz.sum(axis=0)
        d = dz @ self.params[j].T
        base = 2 * c.trunk_depth + 2
        for i in range(c.scatter_depth - 1, -1, -1):
            h_in, h_out = cache["scatter"][i]
            d = d * (h_out > 0.0)
            grads[base + 2 * i] = h_in.T @ d
            grads[base + 2 * i + 1] = d.sum(axis=0)
            d = d @ self.params[base + 2 * i].T
        d_trunk = d[:, : c.trunk_width]  # encoded direction inputs get no gradient

        # density head
        i = 2 * c.trunk_depth
        d_pre = np.asarray(d_sigma, dtype=self.dtype)[:, None] * _sigmoid(cache["sigma_pre"])
        grads[i] = cache["trunk_out"].T @ d_pre
        grads[i + 1] = d_pre.sum(axis=0)
        d_trunk = d_trunk + d_pre @ self.params[i].T

        # trunk
        d = d_trunk
        for i in range(c.trunk_depth - 1, -1, -1):
            h_in, h_out = cache["trunk"][i]
            d = d * (h_out > 0.0)
            grads[2 * i] = h_in.T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.params[2 * i].T
            if i == c.skip_layer and i > 0:
                d = d[:, : c.trunk_width]  # drop the skip copy of the encoding
        return grads


class MlpField(ScatteringField):
    """ScatteringField adapter so a trained network renders like any other
    object. Bounds come from the checkpoint; queries outside them are the
    renderer's concern (the network extrapolates smoothly)."""

    def __init__(self, model: Mlp, bounds: Aabb):
        self.model = model
        self.bounds = bounds

    def canonical_bounds(self) -> Aabb:
        return self.bounds

    def density_many(self, positions) -> np.ndarray:
        flat = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        out = self.model.density(flat).astype(np.float64)
        return out.reshape(np.asarray(positions).shape[:-1])

    def scatter_many(self, positions, light_dirs, view_dirs) -> np.ndarray:
        shape = np.asarray(positions).shape
        flat_p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        flat_l = np.broadcast_to(np.asarray(light_dirs, dtype=np.float64), shape).reshape(-1, 3)
        flat_v = np.broadcast_to(np.asarray(view_dirs, dtype=np.float64), shape).reshape(-1, 3)
        out = np.empty((len(flat_p), 3))
        for lo in range(0, len(flat_p), _EVAL_BLOCK):
            hi = min(lo + _EVAL_BLOCK, len(flat_p))
            _, rho, _ = self.model.forward(flat_p[lo:hi], flat_l[lo:hi], flat_v[lo:hi])
            out[lo:hi] = rho
        return out.reshape(shape[:-1] + (3,))


# ---------------------------------------------------------------------------
# Differentiable compositing
# ---------------------------------------------------------------------------


def forward_gaps(t: np.ndarray, t_far) -> np.ndarray:
    """Interval owned by each sample: gap to the next, remainder for the last."""
    last = np.asarray(t_far)[..., None] - t[..., -1:]
    if t.shape[-1] == 1:
        return last
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


def composite_forward(alpha: np.ndarray, rho: np.ndarray, background) -> dict:
    """Front-to-back compositing of (B, M) opacities and (B, M, 3) colors.

    Returns dict with color (B, 3), per-sample weights, and the pieces the
    backward pass needs.
    """
    keep = 1.0 - alpha
    trans = np.cumprod(keep, axis=1)
    t_excl = np.concatenate([np.ones_like(alpha[:, :1]), trans[:, :-1]], axis=1)
    weights = alpha * t_excl
    bg = np.asarray(background, dtype=rho.dtype)
    color = (weights[..., None] * rho).sum(axis=1) + trans[:, -1:] * bg
    return {
        "color": color,
        "weights": weights,
        "t_excl": t_excl,
        "alpha": alpha,
        "rho": rho,
        "bg": bg,
    }


def composite_backward(fwd: dict, d_color: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(d_alpha (B, M), d_rho (B, M, 3)) given gradient of the ray colors.

    The alpha gradient uses the reverse recurrence over downstream radiance:
    raising alpha_i trades the radiance behind sample i for the sample's own.
    """
    alpha, rho, t_excl = fwd["alpha"], fwd["rho"], fwd["t_excl"]
    weights = fwd["weights"]
    d_rho = weights[..., None] * d_color[:, None, :]
    q = (rho * d_color[:, None, :]).sum(axis=2)  # (B, M)
    m = alpha.shape[1]
    g = np.broadcast_to((fwd["bg"] * d_color).sum(axis=1)[:, None], (alpha.shape[0], 1)).copy()
    d_alpha = np.empty_like(alpha)
    for i in range(m - 1, -1, -1):
        d_alpha[:, i] = t_excl[:, i] * (q[:, i] - g[:, 0])
        g[:, 0] = alpha[:, i] * q[:, i] + (1.0 - alpha[:, i]) * g[:, 0]
    return d_alpha, d_rho


def resample_from_weights(t_coarse: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant density over the
    midpoint bins of the coarse samples (the hierarchical second pass).

    t_coarse (B, M), weights (B, M), u (B, K) uniforms -> (B, K) distances.
    A small floor on the weights keeps all-zero rows sampling uniformly.
    """
    edges = 0.5 * (t_coarse[:, 1:] + t_coarse[:, :-1])  # (B, M-1) bin edges
    w = weights[:, 1:-1] + 1e-5  # (B, M-2) interior bins
    b, k = w.shape
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1), dtype=pdf.dtype), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    # row-offset trick: searchsorted over all rows in one flat call
    offsets = (2.0 * np.arange(b))[:, None]
    flat_cdf = (cdf + offsets).ravel()
    flat_u = (np.clip(u, 0.0, 1.0 - 1e-12) + offsets).ravel()
    idx = np.searchsorted(flat_cdf, flat_u, side="right") - np.repeat(np.arange(b), u.shape[1]) * (
        k + 1
    )
    idx = idx.reshape(b, -1)
    below = np.clip(idx - 1, 0, k)
    above = np.clip(idx, 0, k)

    take = lambda a, i: np.take_along_axis(a, i, axis=1)
    c0, c1 = take(cdf, below), take(cdf, above)
    e0, e1 = take(edges, below), take(edges, above)
    denom = np.where(c1 - c0 < 1e-12, 1.0, c1 - c0)
    frac = (np.clip(u, 0.0, 1.0) - c0) / denom
    return e0 + frac * (e1 - e0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: List[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def prepare_training_rays(origins, dirs, targets, light_positions, bounds: Aabb) -> Dict[str, np.ndarray]:
    """Filter rays to those crossing the bounds and attach march intervals."""
    from .geom import ray_box_intersect_batch

    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    hit, t0, t1 = ray_box_intersect_batch(o, d, bounds)
    keep = hit & (t1 > t0)
    return {
        "origins": o[keep],
        "dirs": d[keep],
        "targets": np.asarray(targets, dtype=np.float64)[keep],
        "light_positions": np.asarray(light_positions, dtype=np.float64)[keep],
        "t_near": t0[keep],
        "t_far": t1[keep],
    }


def _render_rays_for_training(model, t, origins, dirs, light_positions, t_far, background):
    """Forward pass of one network over (B, M) sample distances; returns the
    composite dict plus the model cache and sample geometry."""
    b, m = t.shape
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat_pos = pos.reshape(-1, 3)
    delta = light_positions[:, None, :] - pos
    norm = np.linalg.norm(delta, axis=-1, keepdims=True)
    light_dirs = (delta / np.maximum(norm, 1e-12)).reshape(-1, 3)
    view_dirs = np.broadcast_to(dirs[:, None, :], pos.shape).reshape(-1, 3)

    sigma, rho, cache = model.forward(flat_pos, light_dirs, view_dirs, want_cache=True)
    gaps = forward_gaps(t, t_far)
    alpha = 1.0 - np.exp(-sigma.reshape(b, m).astype(np.float64) * gaps)
    fwd = composite_forward(alpha, rho.reshape(b, m, 3).astype(np.float64), background)
    fwd["gaps"] = gaps
    fwd["sigma"] = sigma.reshape(b, m)
    fwd["cache"] = cache
    return fwd


def _backprop_rays(model, fwd, d_color):
    d_alpha, d_rho = composite_backward(fwd, d_color)
    # d alpha / d sigma = gap * exp(-sigma gap) = gap * (1 - alpha)
    d_sigma = d_alpha * fwd["gaps"] * (1.0 - fwd["alpha"])
    return model.backward(fwd["cache"], d_sigma.reshape(-1), d_rho.reshape(-1, 3))


def train_step(
    coarse: Mlp,
    fine: Mlp,
    rays: Dict[str, np.ndarray],
    batch_idx: np.ndarray,
    step_key,
    n_coarse: int,
    n_fine: int,
    background,
) -> Tuple[float, float, List[np.ndarray], List[np.ndarray]]:
    """One optimization step's losses and gradients for both networks.

    Loss is the summed-channel squared error of coarse and fine ray colors,
    averaged over the batch; the coarse network's weights also steer where
    the fine pass concentrates its samples.
    """
    o = rays["origins"][batch_idx]
    d = rays["dirs"][batch_idx]
    lp = rays["light_positions"][batch_idx]
    target = rays["targets"][batch_idx]
    t0 = rays["t_near"][batch_idx]
    t1 = rays["t_far"][batch_idx]
    b = len(batch_idx)

    coarse_keys = mix_key(step_key, _TAG_COARSE, np.arange(b))
    t_c = stratified_samples_from_keys(coarse_keys, t0, t1, n_coarse)
    fwd_c = _render_rays_for_training(coarse, t_c, o, d, lp, t1, background)
    res_c = fwd_c["color"] - target
    loss_c = float((res_c**2).sum(axis=1).mean())
    grads_c = _backprop_rays(coarse, fwd_c, 2.0 * res_c / b)

    u = key_uniforms(mix_key(step_key, _TAG_FINE, np.arange(b)), n_fine)
    t_f = resample_from_weights(t_c, fwd_c["weights"], u)
    t_all = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    fwd_f = _render_rays_for_training(fine, t_all, o, d, lp, t1, background)
    res_f = fwd_f["color"] - target
    loss_f = float((res_f**2).sum(axis=1).mean())
    grads_f = _backprop_rays(fine, fwd_f, 2.0 * res_f / b)

    return loss_c, loss_f, grads_c, grads_f


def fit(
    coarse: Mlp,
    fine: Mlp,
    rays: Dict[str, np.ndarray],
    iterations: int,
    batch_size: int = 256,
    seed: int = 0,
    n_coarse: int = 32,
    n_fine: int = 48,
    lr: float = 1e-3,
    background=(0.0, 0.0, 0.0),
    bounds: Optional[Aabb] = None,
    checkpoint_path: Optional[str] = None,
    csv_path: Optional[str] = None,
    checkpoint_every: int = 1000,
    log_every: int = 50,
    start_iteration: int = 0,
    opt_coarse: Optional[Adam] = None,
    opt_fine: Optional[Adam] = None,
    progress=None,
) -> dict:
    """Optimize the pair in place. Iteration k always draws the same batch
    and sample jitter for a given seed, so an interrupted run resumed from a
    checkpoint retraces the original trajectory bitwise.

    Returns {"status": "ok" | "diverged", "iteration", "coarse_loss",
    "fine_loss"}. On divergence the last finite checkpoint stays on disk.
    """
    n_rays = len(rays["origins"])
    if n_rays == 0:
        raise ValueError("no training rays intersect the field bounds")
    opt_c = opt_coarse or Adam(coarse.parameters(), lr=lr)
    opt_f = opt_fine or Adam(fine.parameters(), lr=lr)
    root = Rng(seed)
    loss_c = loss_f = float("nan")

    if csv_path and start_iteration == 0:
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["iteration", "coarse_loss", "fine_loss"])

    def checkpoint(it):
        if checkpoint_path:
            save_checkpoint(checkpoint_path, coarse, fine, bounds, it)
            save_optimizer(checkpoint_path + ".optim.npz", opt_c, opt_f)

    for it in range(start_iteration, iterations):
        step = root.derive(_TAG_TRAIN, it)
        batch_idx = Rng._from_key(mix_key(step.key, _TAG_BATCH)).integers(n_rays, batch_size)
        loss_c, loss_f, grads_c, grads_f = train_step(
            coarse, fine, rays, batch_idx, step.key, n_coarse, n_fine, background
        )
        if not (np.isfinite(loss_c) and np.isfinite(loss_f)):
            return {"status": "diverged", "iteration": it, "coarse_loss": loss_c, "fine_loss": loss_f}
        opt_c.step(coarse.parameters(), grads_c)
        opt_f.step(fine.parameters(), grads_f)

        done = it + 1
        if csv_path and (done % log_every == 0 or done == iterations):
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([done, f"{loss_c:.8f}", f"{loss_f:.8f}"])
        if done % checkpoint_every == 0 and done != iterations:
            checkpoint(done)
        if progress and done % log_every == 0:
            progress(done, loss_c, loss_f)

    checkpoint(iterations)
    return {"status": "ok", "iteration": iterations, "coarse_loss": loss_c, "fine_loss": loss_f}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_config(c: MlpConfig) -> bytes:
    return struct.pack(
        "<8If",
        c.pos_freqs,
        c.dir_freqs,
        int(c.include_input),
        c.trunk_depth,
        c.trunk_width,
        c.scatter_depth,
        c.scatter_width,
        c.skip_layer,
        c.sigmoid_gain,
    ) + struct.pack("<I", int(c.zero_light_dir))


def _unpack_config(fh) -> MlpConfig:
    vals = struct.unpack("<8If", fh.read(36))
    (zero_ld,) = struct.unpack("<I", fh.read(4))
    return MlpConfig(
        pos_freqs=vals[0],
        dir_freqs=vals[1],
        include_input=bool(vals[2]),
        trunk_depth=vals[3],
        trunk_width=vals[4],
        scatter_depth=vals[5],
        scatter_width=vals[6],
        skip_layer=vals[7],
        sigmoid_gain=vals[8],
        zero_light_dir=bool(zero_ld),
    )


def save_checkpoint(path: str, coarse: Mlp, fine: Mlp, bounds: Optional[Aabb], iteration: int) -> None:
    """Versioned little-endian binary: header, bounds, then the float32
    parameter arrays of the coarse network followed by the fine network."""
    if bounds is None:
        raise ValueError("bounds are required to place the field in a scene")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", _CHECKPOINT_VERSION))
        fh.write(_pack_config(coarse.config))
        fh.write(struct.pack("<Q", int(iteration)))
        fh.write(struct.pack("<6d", *bounds.min_corner, *bounds.max_corner))
        arrays = coarse.parameters() + fine.parameters()
        fh.write(struct.pack("<Q", len(arrays)))
        for a in arrays:
            data = np.ascontiguousarray(a, dtype="<f4").tobytes()
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str, dtype=np.float32) -> Tuple[Mlp, Mlp, Aabb, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = _unpack_config(fh)
        (iteration,) = struct.unpack("<Q", fh.read(8))
        b = struct.unpack("<6d", fh.read(48))
        bounds = Aabb(np.array(b[:3]), np.array(b[3:]))
        (n_arrays,) = struct.unpack("<Q", fh.read(8))

        coarse = Mlp(config, dtype=dtype)
        fine = Mlp(config, dtype=dtype)
        slots = coarse.parameters() + fine.parameters()
        if n_arrays != len(slots):
            raise ValueError(f"{path}: expected {len(slots)} arrays, found {n_arrays}")
        for slot in slots:
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            if nbytes != slot.size * 4:
                raise ValueError(f"{path}: array size mismatch")
            arr = np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(slot.shape)
            if not np.isfinite(arr).all():
                raise ValueError(f"{path}: checkpoint holds non-finite weights")
            slot[...] = arr.astype(dtype)
    return coarse, fine, bounds, iteration


def save_optimizer(path: str, opt_coarse: Adam, opt_fine: Adam) -> None:
    state = {
        "t": np.array([opt_coarse.t, opt_fine.t], dtype=np.int64),
        "hyper": np.array(
            [opt_coarse.lr, opt_coarse.beta1, opt_coarse.beta2, opt_coarse.eps], dtype=np.float64
        ),
    }
    for tag, opt in (("c", opt_coarse), ("f", opt_fine)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            state[f"{tag}_m_{i}"] = m
            state[f"{tag}_v_{i}"] = v
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **state)
    os.replace(tmp, path)


def load_optimizer(path: str, opt_coarse: Adam, opt_fine: Adam) -> None:
    with np.load(path) as data:
        opt_coarse.t, opt_fine.t = (int(x) for x in data["t"])
        # plain floats: numpy scalars would promote the f32 update arithmetic
        hyper = [float(x) for x in data["hyper"]]
        opt_coarse.lr, opt_coarse.beta1, opt_coarse.beta2, opt_coarse.eps = hyper
        opt_fine.lr, opt_fine.beta1, opt_fine.beta2, opt_fine.eps = hyper
        for tag, opt in (("c", opt_coarse), ("f", opt_fine)):
            for i in range(len(opt.m)):
                opt.m[i][...] = data[f"{tag}_m_{i}"]
                opt.v[i][...] = data[f"{tag}_v_{i}"]
