"""Conditional mask denoiser: an image encoder producing a feature map and a
U-shaped mask decoder over two resolutions.

The decoder maps (noisy analog bits, image features, time, optional past-mask
bits) to per-pixel class and instance logits; predicted analog bits are the
softmax-weighted average of the per-category bit codes, so they always lie in
[-b, +b].
"""

import math

import numpy as np

from . import engine as E
from .masks import int2bit


class NetConfig:
    def __init__(self, width=16, depth=2, feature_dim=64, time_dim=128,
                 use_past_masks=False, past_frames=0):
        if min(width, depth, feature_dim, time_dim) < 1:
            raise ValueError("all network dims must be positive")
        if past_frames not in (0, 1, 2):
            raise ValueError(f"past_frames must be 0, 1 or 2, got {past_frames}")
        if use_past_masks != (past_frames > 0):
            raise ValueError("use_past_masks must match past_frames > 0")
        self.width = int(width)
        self.depth = int(depth)
        self.feature_dim = int(feature_dim)
        self.time_dim = int(time_dim)
        self.use_past_masks = bool(use_past_masks)
        self.past_frames = int(past_frames)

    def to_dict(self):
        return {
            "width": self.width,
            "depth": self.depth,
            "feature_dim": self.feature_dim,
            "time_dim": self.time_dim,
            "use_past_masks": self.use_past_masks,
            "past_frames": self.past_frames,
        }


class DenoiserOutput:
    __slots__ = ("class_logits", "instance_logits", "analog_bits")

    def __init__(self, class_logits, instance_logits, analog_bits):
        self.class_logits = class_logits
        self.instance_logits = instance_logits
        self.analog_bits = analog_bits


def time_embedding(t, dim, batch):
    """Sinusoidal embedding of t (scaled by 1000), shape [batch, dim]."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(batch, float(t))
    half = dim // 2
    freqs = np.exp(np.arange(half) * -(math.log(10000.0) / max(half - 1, 1)))
    args = t[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _bit_code(count, nbits, scale, dtype):
    codes = int2bit(np.arange(count), nbits).astype(dtype)
    return (codes * 2.0 - 1.0) * scale


def logits_to_analog(class_logits, instance_logits, codec_cfg):
    """Softmax-weighted average of the per-category analog bit codes.

    Differentiable, so the l2 objective can train through it. Class and
    instance channels are handled independently.
    """
    dtype = class_logits.data.dtype
    out_chunks = []
    for logits, nbits in (
        (class_logits, codec_cfg.class_bits),
        (instance_logits, codec_cfg.instance_bits),
    ):
        count = logits.data.shape[-1]
        code = E.Tensor(_bit_code(count, nbits, codec_cfg.scale, dtype))
        probs = E.softmax(logits)
        lead = logits.data.shape[:-1]
        flat = E.reshape(probs, (-1, count))
        bits = E.reshape(E.matmul(flat, code), lead + (nbits,))
        out_chunks.append(bits)
    return E.concat_channels(out_chunks)


class MaskDenoiser:
    """Encoder/decoder pair over named parameter tensors."""

    def __init__(self, net_cfg, codec_cfg, num_classes, max_instances, seed=0):
        codec_cfg.check_capacity(num_classes, max_instances)
        self.cfg = net_cfg
        self.codec = codec_cfg
        self.num_classes = int(num_classes)
        self.max_instances = int(max_instances)
        self.params = {}
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    @property
    def decoder_in_channels(self):
        bits = self.codec.total_bits
        return bits + self.cfg.feature_dim + self.cfg.past_frames * bits

    def _add(self, name, arr):
        self.params[name] = E.Tensor(arr, requires_grad=True)

    def _init_conv(self, name, ci, co, rng):
        limit = math.sqrt(6.0 / (9 * ci + 9 * co))
        self._add(f"{name}/w", rng.uniform(-limit, limit, (3, 3, ci, co)))
        self._add(f"{name}/b", np.zeros(co))

    def _init_dense(self, name, ci, co, rng):
        limit = math.sqrt(6.0 / (ci + co))
        self._add(f"{name}/w", rng.uniform(-limit, limit, (ci, co)))
        self._add(f"{name}/b", np.zeros(co))

    def _init_block(self, name, ci, co, rng):
        self._add(f"{name}/ln_g", np.ones(ci))
        self._add(f"{name}/ln_b", np.zeros(ci))
        self._init_conv(name, ci, co, rng)
        self._init_dense(f"{name}/t", self.cfg.time_dim, co, rng)

    def _build(self, rng):
        # Full resolution carries only a conv stem and two decoder blocks; the
        # `depth` conv blocks per side run at half resolution, where a 3x3 conv
        # costs a quarter as much.
        w, d = self.cfg.width, self.cfg.depth
        td = self.cfg.time_dim
        if self.cfg.feature_dim <= w:
            raise ValueError(f"feature_dim must exceed width {w}")
        self._init_conv("enc/stem", 3, w, rng)
        for i in range(d):
            self._init_conv(f"enc/c1_{i}", w if i == 0 else 2 * w, 2 * w, rng)
        self._init_dense("enc/proj", 2 * w, self.cfg.feature_dim - w, rng)

        self._init_dense("dec/temb1", td, td, rng)
        self._init_dense("dec/temb2", td, td, rng)
        self._init_dense("dec/in", self.decoder_in_channels, w, rng)
        self._init_block("dec/d0", w, w, rng)
        for i in range(d):
            self._init_block(f"dec/d1_{i}", w if i == 0 else 2 * w, 2 * w, rng)
        self._init_dense("dec/skip", 3 * w, w, rng)
        self._init_block("dec/d2", w, w, rng)
        self._add("dec/head/ln_g", np.ones(w))
        self._add("dec/head/ln_b", np.zeros(w))
        self._init_dense("dec/head", w, self.num_classes + self.max_instances + 1, rng)

    # -- helpers -----------------------------------------------------------

    def _dense(self, x, name):
        b, h, w, c = x.data.shape
        co = self.params[f"{name}/w"].data.shape[1]
        flat = E.reshape(x, (b * h * w, c))
        y = E.add(E.matmul(flat, self.params[f"{name}/w"]), self.params[f"{name}/b"])
        return E.reshape(y, (b, h, w, co))

    def _conv(self, x, name):
        y = E.conv2d(x, self.params[f"{name}/w"])
        return E.add(y, self.params[f"{name}/b"])

    def _block(self, x, name, temb):
        ci = x.data.shape[-1]
        co = self.params[f"{name}/w"].data.shape[-1]
        z = E.layer_norm(x, self.params[f"{name}/ln_g"], self.params[f"{name}/ln_b"])
        z = self._conv(z, name)
        tp = E.matmul(temb, self.params[f"{name}/t/w"])
        tp = E.add(tp, self.params[f"{name}/t/b"])
        tp = E.reshape(tp, (x.data.shape[0], 1, 1, co))
        z = E.relu(E.add(z, tp))
        if ci == co:
            z = E.add(z, x)
        return z

    @staticmethod
    def _as_tensor(x):
        if isinstance(x, E.Tensor):
            return x
        return E.Tensor(np.asarray(x, dtype=E.default_dtype()))

    # -- forward passes ------------------------------------------------------

    def encode_image(self, images):
        """[B, H, W, 3] image in [0,1] -> [B, H, W, d] feature map.

        Full-resolution stem features and upsampled half-resolution features
        are concatenated, so the map carries both detail and context.
        """
        x = self._as_tensor(images)
        if x.data.ndim != 4 or x.data.shape[3] != 3:
            raise ValueError(f"encode_image expects [B,H,W,3], got {x.data.shape}")
        if x.data.shape[1] % 2 or x.data.shape[2] % 2:
            raise ValueError(f"image dims must be even, got {x.data.shape}")
        stem = E.relu(self._conv(x, "enc/stem"))
        x = E.avg_pool2x2(stem)
        for i in range(self.cfg.depth):
            x = E.relu(self._conv(x, f"enc/c1_{i}"))
        x = E.upsample2x(self._dense(x, "enc/proj"))
        return E.concat_channels([stem, x])

    def _time_features(self, t, batch):
        emb = E.Tensor(
            time_embedding(t, self.cfg.time_dim, batch).astype(E.default_dtype())
        )
        z = E.relu(E.add(E.matmul(emb, self.params["dec/temb1/w"]), self.params["dec/temb1/b"]))
        return E.add(E.matmul(z, self.params["dec/temb2/w"]), self.params["dec/temb2/b"])

    def decode_mask(self, m_crpt, h, t, past=None):
        """Denoise one step: predict logits and analog bits from the noisy mask."""
        m = self._as_tensor(m_crpt)
        h = self._as_tensor(h)
        if past is not None and self.cfg.past_frames == 0:
            raise ValueError("past masks supplied, but the network has no past-mask channels")
        parts = [m, h]
        if self.cfg.past_frames > 0:
            npast = self.cfg.past_frames * self.codec.total_bits
            if past is None:
                past = E.Tensor(
                    np.zeros(m.data.shape[:3] + (npast,), dtype=E.default_dtype())
                )
            else:
                past = self._as_tensor(past)
                if past.data.shape[-1] != npast:
                    raise ValueError(
                        f"expected {npast} past-mask channels, got {past.data.shape[-1]}"
                    )
            parts.append(past)
        x = E.concat_channels(parts)
        if x.data.shape[-1] != self.decoder_in_channels:
            raise ValueError(
                f"decoder input channels {x.data.shape[-1]} != configured "
                f"{self.decoder_in_channels}"
            )
        batch = x.data.shape[0]
        temb = self._time_features(t, batch)

        x = self._dense(x, "dec/in")
        x = self._block(x, "dec/d0", temb)
        skip = x
        x = E.avg_pool2x2(x)
        for i in range(self.cfg.depth):
            x = self._block(x, f"dec/d1_{i}", temb)
        x = E.upsample2x(x)
        x = E.relu(self._dense(E.concat_channels([skip, x]), "dec/skip"))
        x = self._block(x, "dec/d2", temb)
        x = E.layer_norm(x, self.params["dec/head/ln_g"], self.params["dec/head/ln_b"])
        logits = self._dense(x, "dec/head")

        c = self.num_classes
        class_logits = E.slice_channels(logits, 0, c)
        instance_logits = E.slice_channels(logits, c, c + self.max_instances + 1)
        analog = logits_to_analog(class_logits, instance_logits, self.codec)
        return DenoiserOutput(class_logits, instance_logits, analog)

    def denoiser_fn(self):
        """Adapter for the sampling loop: (m_t, h, t, past) -> m_pred array."""

        def fn(m_t, h, t, past):
            return self.decode_mask(m_t, h, t, past).analog_bits.data

        return fn

    # -- parameter state -----------------------------------------------------

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch; missing={sorted(missing)}, extra={sorted(extra)}")
        for name, arr in state.items():
            p = self.params[name]
            if tuple(arr.shape) != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return {name: p.grad for name, p in self.params.items() if p.grad is not None}
