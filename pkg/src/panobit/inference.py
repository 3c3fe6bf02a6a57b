"""Batch sampling helpers: per-image seeded noise (so results do not depend
on batch composition), EMA weight swapping, and streaming video inference."""

from contextlib import contextmanager

import numpy as np

from .diffusion import NoiseSchedule, SamplerConfig, encode_past_masks, sample_bits
from .masks import decode_analog, filter_small_instances


@contextmanager
def using_state(net, state):
    """Temporarily run a net with other parameter values (e.g. the EMA)."""
    saved = net.state_dict()
    net.load_state(state)
    try:
        yield net
    finally:
        net.load_state(saved)


def _init_noise(shape_hw, bits, indices, seed):
    noise = [
        np.random.default_rng([seed, int(i)])
        .standard_normal((shape_hw[0], shape_hw[1], bits))
        .astype(np.float32)
        for i in indices
    ]
    return np.stack(noise)


def sample_images(net, images, indices, cfg, min_pixels=0, sched=None, past=None, trajectory=None):
    """Generate one mask per image; deterministic per (cfg.seed, index)."""
    sched = sched or NoiseSchedule()
    images = np.asarray(images)
    h = net.encode_image(images)
    m_init = _init_noise(images.shape[1:3], net.codec.total_bits, indices, cfg.seed)

    def denoise_fn(m_t, t_now):
        return net.decode_mask(m_t, h, t_now, past).analog_bits.data

    bits = sample_bits(denoise_fn, m_init, cfg, sched, net.codec.scale, trajectory=trajectory)
    masks = []
    for i in range(len(images)):
        m = decode_analog(bits[i], net.codec, net.num_classes, net.max_instances)
        masks.append(filter_small_instances(m, min_pixels))
    return masks


def predict_dataset(net, dataset, cfg, min_pixels=0, batch_size=8, sched=None, limit=None):
    """Sample masks over a SceneDataset; returns [(pred, gt)] pairs."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    pairs = []
    for start in range(0, n, batch_size):
        chunk = range(start, min(start + batch_size, n))
        images, gts, indices = [], [], []
        for i in chunk:
            img, gt = dataset[i]
            images.append(img)
            gts.append(gt)
            indices.append(dataset.index(i))
        preds = sample_images(net, np.stack(images), indices, cfg, min_pixels, sched=sched)
        pairs.extend(zip(preds, gts))
    return pairs


def sample_video(net, frames, cfg, steps_first=32, steps_rest=8, min_pixels=0, sched=None,
                 video_index=0):
    """Streaming inference: frame k is conditioned on the masks predicted for
    the previous frames; the first frame gets more refinement steps."""
    sched = sched or NoiseSchedule()
    if net.cfg.past_frames < 1:
        raise ValueError("sample_video needs a net with past-mask conditioning")
    preds = []
    for f, frame in enumerate(frames):
        steps = steps_first if f == 0 else steps_rest
        frame_cfg = SamplerConfig(steps=steps, td=cfg.td, seed=cfg.seed)
        history = [
            preds[f - k] if f - k >= 0 else None
            for k in range(1, net.cfg.past_frames + 1)
        ]
        past = encode_past_masks(history, net.codec, frame.shape[:2])[None]
        mask = sample_images(
            net,
            frame[None],
            [(video_index << 16) + f],
            frame_cfg,
            min_pixels=min_pixels,
            sched=sched,
            past=past,
        )[0]
        preds.append(mask)
    return preds


def predict_video_dataset(net, dataset, cfg, steps_first=32, steps_rest=8, min_pixels=0,
                          sched=None, limit=None):
    """Sample every video of a VideoDataset; returns [(pred_frames, gt_frames)]."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    out = []
    for i in range(n):
        frames, gt_masks, _ = dataset[i]
        preds = sample_video(
            net, frames, cfg, steps_first, steps_rest, min_pixels, sched,
            video_index=dataset.index(i),
        )
        out.append((preds, gt_masks))
    return out
