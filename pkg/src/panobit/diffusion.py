"""Continuous-time diffusion over analog bits: cosine schedule, forward
corruption, deterministic DDIM reverse step with asymmetric time intervals,
and the full sampling loop."""

import math

import numpy as np

from .masks import decode_analog, encode_analog


class NoiseSchedule:
    """gamma(t) = cos(((t + ns) / (1 + ds)) * pi/2)^2, strictly decreasing on [0,1]."""

    def __init__(self, ns=0.0002, ds=0.00025):
        self.ns = float(ns)
        self.ds = float(ds)

    def gamma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        g = np.cos(((t + self.ns) / (1.0 + self.ds)) * math.pi / 2.0) ** 2
        return float(g) if g.ndim == 0 else g


class SamplerConfig:
    def __init__(self, steps=20, td=2.0, seed=0):
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if td < 0:
            raise ValueError(f"td must be >= 0, got {td}")
        self.steps = int(steps)
        self.td = float(td)
        self.seed = int(seed)


def corrupt(x0, t, eps, sched):
    """Forward process: x_t = sqrt(gamma) * x0 + sqrt(1 - gamma) * eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"corrupt: x0 shape {x0.shape} != eps shape {eps.shape}")
    g = sched.gamma(t)
    dt = x0.dtype
    return np.sqrt(dt.type(g)) * x0 + np.sqrt(dt.type(1.0 - g)) * eps


def ddim_step(x_t, x_pred, t_now, t_next, sched, scale):
    """Deterministic reverse update from t_now to t_next.

    The prediction is clipped to the analog-bit range before the implied
    noise is recovered and re-applied at t_next.
    """
    if t_next > t_now:
        raise ValueError(f"ddim_step: t_next {t_next} must be <= t_now {t_now}")
    x_t = np.asarray(x_t)
    x_pred = np.asarray(x_pred)
    if x_t.shape != x_pred.shape:
        raise ValueError(f"ddim_step: shapes {x_t.shape} and {x_pred.shape} differ")
    g_now = sched.gamma(t_now)
    if 1.0 - g_now == 0.0:
        raise ZeroDivisionError(
            "ddim_step: gamma(t_now) == 1 gives a zero noise denominator; use t_now > 0"
        )
    g_next = sched.gamma(t_next)
    dt = x_t.dtype
    x_pred = np.clip(x_pred, -scale, scale)
    eps = (x_t - np.sqrt(dt.type(g_now)) * x_pred) / np.sqrt(dt.type(1.0 - g_now))
    return np.sqrt(dt.type(g_next)) * x_pred + np.sqrt(dt.type(1.0 - g_next)) * eps


def time_grid(step, cfg):
    """(t_now, t_next) for a sampling step; td shifts t_next ahead of the
    symmetric grid, clamped at 0."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} out of range [0, {cfg.steps})")
    t_now = 1.0 - step / cfg.steps
    t_next = max(1.0 - (step + 1 + cfg.td) / cfg.steps, 0.0)
    return t_now, t_next


def sample_bits(denoise_fn, m_init, cfg, sched, scale, trajectory=None):
    """Run the reverse loop from initial noise m_init and return the final
    analog-bit prediction (the last m_pred, not the last diffusion state).

    denoise_fn(m_t, t_now) -> m_pred, operating on [B, H, W, bits] arrays.
    """
    m_t = m_init
    m_pred = None
    for step in range(cfg.steps):
        t_now, t_next = time_grid(step, cfg)
        m_pred = denoise_fn(m_t, t_now)
        if trajectory is not None:
            trajectory.append((step, t_now, m_pred))
        m_t = ddim_step(m_t, m_pred, t_now, t_next, sched, scale)
    return m_pred


def sample(denoiser, h, cfg, codec_cfg, num_classes, max_instances, sched=None, past=None, rng=None, trajectory=None):
    """Generate panoptic masks for a batch of encoded images.

    denoiser(m_t, h, t, past) -> m_pred analog bits; h is the image feature
    map, computed once outside the loop. Returns a list of PanopticMask.
    """
    if sched is None:
        sched = NoiseSchedule()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    b, hh, ww = h.shape[0], h.shape[1], h.shape[2]
    m_init = rng.standard_normal((b, hh, ww, codec_cfg.total_bits)).astype(np.float32)

    def denoise_fn(m_t, t_now):
        return denoiser(m_t, h, t_now, past)

    bits = sample_bits(denoise_fn, m_init, cfg, sched, codec_cfg.scale, trajectory=trajectory)
    return [decode_analog(bits[i], codec_cfg, num_classes, max_instances) for i in range(b)]


def encode_past_masks(masks_per_frame, codec_cfg, like_shape):
    """Stack past-frame masks into conditioning bits; None slots become zeros.

    masks_per_frame is a list (most recent first) of PanopticMask or None;
    returns [H, W, n_frames * bits]. The all-zero code marks "no frame",
    distinguishable from any real encoding (+-b).
    """
    h, w = like_shape
    chunks = []
    for m in masks_per_frame:
        if m is None:
            chunks.append(np.zeros((h, w, codec_cfg.total_bits), dtype=np.float32))
        else:
            chunks.append(encode_analog(m, codec_cfg, dtype=np.float32))
    return np.concatenate(chunks, axis=-1)
