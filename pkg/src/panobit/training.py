"""Training loop for the conditional mask denoiser.

One optimizer step: draw a batch, randomly re-assign instance ids, encode to
analog bits, corrupt at a per-sample uniform time, run the decoder on the
noisy bits plus image features (and teacher-forced past masks in video mode),
apply the weighted cross-entropy (or l2) objective, then Adam + EMA.

Per-step randomness is derived statelessly from (seed, step), so resuming
from a checkpoint reproduces the uninterrupted run bit for bit.
"""

import json
import struct
import time

import numpy as np
from scipy import ndimage

from . import engine as E
from .diffusion import NoiseSchedule, corrupt, encode_past_masks
from .masks import BitCodecConfig, PanopticMask, encode_analog, permute_instance_ids
from .network import MaskDenoiser, NetConfig

_STEP_STREAM = 1000003  # rng stream tag, disjoint from scene generation


class TrainConfig:
    def __init__(self, codec=None, loss="cross_entropy", loss_weight_p=0.2, lr=1e-3,
                 ema_decay=0.999, batch_size=8, steps=2000, seed=0, video_mode=False,
                 past_frames=0, log_every=50, checkpoint_every=0):
        if loss not in ("cross_entropy", "l2"):
            raise ValueError(f"loss must be 'cross_entropy' or 'l2', got '{loss}'")
        if loss_weight_p < 0:
            raise ValueError(f"loss_weight_p must be >= 0, got {loss_weight_p}")
        if not 0 <= ema_decay < 1:
            raise ValueError(f"ema_decay must lie in [0, 1), got {ema_decay}")
        self.codec = codec or BitCodecConfig()
        self.loss = loss
        self.loss_weight_p = float(loss_weight_p)
        self.lr = float(lr)
        self.ema_decay = float(ema_decay)
        self.batch_size = int(batch_size)
        self.steps = int(steps)
        self.seed = int(seed)
        self.video_mode = bool(video_mode)
        self.past_frames = int(past_frames)
        self.log_every = int(log_every)
        self.checkpoint_every = int(checkpoint_every)

    def to_dict(self):
        return {
            "codec": {
                "class_bits": self.codec.class_bits,
                "instance_bits": self.codec.instance_bits,
                "scale": self.codec.scale,
            },
            "loss": self.loss,
            "loss_weight_p": self.loss_weight_p,
            "lr": self.lr,
            "ema_decay": self.ema_decay,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "seed": self.seed,
            "video_mode": self.video_mode,
            "past_frames": self.past_frames,
            "log_every": self.log_every,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        codec = d.pop("codec", None)
        if codec is not None:
            codec = BitCodecConfig(**codec)
        return cls(codec=codec, **d)


# -- objectives ---------------------------------------------------------------

def loss_weights(mask, p):
    """Per-pixel weights 1/c^p normalized to sum H*W, where c is the pixel
    count of the segment at that pixel (contiguous region for stuff/null)."""
    if p < 0:
        raise ValueError(f"p must be >= 0, got {p}")
    h, w = mask.shape
    if p == 0:
        return np.ones((h, w), dtype=np.float64)
    c = np.zeros((h, w), dtype=np.float64)
    inst = mask.instance_ids
    thing = inst > 0
    if thing.any():
        counts = np.bincount(inst.ravel())
        c[thing] = counts[inst[thing]]
    rest = ~thing
    if rest.any():
        for cid in np.unique(mask.class_ids[rest]):
            sel = rest & (mask.class_ids == cid)
            labels, _ = ndimage.label(sel)
            sizes = np.bincount(labels.ravel())
            c[sel] = sizes[labels[sel]]
    wgt = 1.0 / c**p
    return h * w * wgt / wgt.sum()


def _target_arrays(target):
    if isinstance(target, PanopticMask):
        return target.class_ids[None].astype(np.int64), target.instance_ids[None].astype(np.int64)
    cls, inst = target
    cls = np.asarray(cls, dtype=np.int64)
    inst = np.asarray(inst, dtype=np.int64)
    if cls.ndim == 2:
        cls, inst = cls[None], inst[None]
    return cls, inst


def ce_loss(output, target, weights):
    """Weighted softmax cross entropy over class and instance channels,
    averaged over pixels and batch."""
    cls, inst = _target_arrays(target)
    weights = np.asarray(weights, dtype=E.default_dtype())
    if weights.ndim == 2:
        weights = weights[None]
    nll = E.add(
        E.cross_entropy_logits(output.class_logits, cls),
        E.cross_entropy_logits(output.instance_logits, inst),
    )
    return E.reduce_mean(E.mul(nll, E.Tensor(weights)))


def l2_loss(m_pred, target_bits, weights):
    """Weighted mean squared error against the clean analog bits."""
    target_bits = np.asarray(target_bits)
    if m_pred.data.shape != target_bits.shape:
        raise ValueError(f"l2_loss: shapes {m_pred.data.shape} vs {target_bits.shape}")
    weights = np.asarray(weights, dtype=E.default_dtype())
    if weights.ndim == 2:
        weights = weights[None]
    d = E.sub(m_pred, E.Tensor(target_bits.astype(E.default_dtype())))
    per_pixel = E.reduce_mean(E.mul(d, d), axis=-1)
    return E.reduce_mean(E.mul(per_pixel, E.Tensor(weights)))


def ema_update(ema, params, decay):
    """ema <- decay * ema + (1 - decay) * raw, per tensor."""
    for name, p in params.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * p.data


def permute_video_ids(masks, rng):
    """One shared injective id remap for all frames of a video sample, so
    teacher-forced past masks stay consistent with the target frame."""
    k = masks[0].max_instances
    lut = np.zeros(k + 1, dtype=np.uint16)
    lut[1:] = rng.permutation(np.arange(1, k + 1, dtype=np.uint16))
    return [
        PanopticMask(m.class_ids.copy(), lut[m.instance_ids], m.num_classes, m.max_instances)
        for m in masks
    ]


# -- trainer ------------------------------------------------------------------

class Trainer:
    def __init__(self, net, cfg, dataset, sched=None):
        if cfg.video_mode and net.cfg.past_frames != cfg.past_frames:
            raise ValueError(
                f"network past_frames {net.cfg.past_frames} != train config {cfg.past_frames}"
            )
        self.net = net
        self.cfg = cfg
        self.dataset = dataset
        self.sched = sched or NoiseSchedule()
        self.adam = E.AdamState(lr=cfg.lr)
        self.ema = net.state_dict()
        self.step = 0
        self.log_rows = []
        self._cache = {}

    # dataset access with an in-memory cache (generation is deterministic)
    def _sample(self, i):
        if i not in self._cache:
            self._cache[i] = self.dataset[i]
        return self._cache[i]

    def _step_rng(self, step):
        return np.random.default_rng([self.cfg.seed, _STEP_STREAM, step])

    def _image_batch(self, rng):
        idx = rng.integers(0, len(self.dataset), self.cfg.batch_size)
        images, masks = [], []
        for i in idx:
            img, mask = self._sample(int(i))
            images.append(img)
            masks.append(permute_instance_ids(mask, rng))
        return np.stack(images), masks, None

    def _video_batch(self, rng):
        idx = rng.integers(0, len(self.dataset), self.cfg.batch_size)
        images, masks, pasts = [], [], []
        for i in idx:
            frames, vmasks, _ = self._sample(int(i))
            vmasks = permute_video_ids(vmasks, rng)
            f = int(rng.integers(0, len(frames)))
            history = [
                vmasks[f - k] if f - k >= 0 else None
                for k in range(1, self.cfg.past_frames + 1)
            ]
            images.append(frames[f])
            masks.append(vmasks[f])
            pasts.append(
                encode_past_masks(history, self.cfg.codec, vmasks[f].shape)
            )
        return np.stack(images), masks, np.stack(pasts)

    def train_step(self):
        """One optimizer step; returns the scalar loss."""
        rng = self._step_rng(self.step)
        if self.cfg.video_mode:
            images, masks, past = self._video_batch(rng)
        else:
            images, masks, past = self._image_batch(rng)
        codec = self.cfg.codec
        dtype = E.default_dtype()

        bits = np.stack([encode_analog(m, codec, dtype) for m in masks])
        t = rng.uniform(0.0, 1.0, len(masks))
        eps = rng.standard_normal(bits.shape).astype(dtype)
        m_crpt = np.stack(
            [corrupt(bits[i], t[i], eps[i], self.sched) for i in range(len(masks))]
        )
        weights = np.stack([loss_weights(m, self.cfg.loss_weight_p) for m in masks])
        cls = np.stack([m.class_ids for m in masks]).astype(np.int64)
        inst = np.stack([m.instance_ids for m in masks]).astype(np.int64)

        with E.Tape() as tape:
            h = self.net.encode_image(images.astype(dtype))
            out = self.net.decode_mask(m_crpt, h, t, past)
            if self.cfg.loss == "cross_entropy":
                loss = ce_loss(out, (cls, inst), weights)
            else:
                loss = l2_loss(out.analog_bits, bits, weights)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(f"loss is not finite at step {self.step}: {loss_val}")
        tape.backward(loss)
        E.adam_update(self.adam, self.net.params, self.net.grads())
        ema_update(self.ema, self.net.params, self.cfg.ema_decay)
        self.net.zero_grads()
        self.step += 1
        return loss_val

    def run(self, num_steps, log_path=None, progress=None, checkpoint_path=None):
        """Train for num_steps more steps, appending (step, loss, lr, wall_ms)
        log rows; optionally checkpoints every cfg.checkpoint_every steps."""
        mode = "a" if self.step > 0 else "w"
        log_file = open(log_path, mode) if log_path else None
        if log_file and mode == "w":
            log_file.write("step,loss,lr,wall_ms\n")
        try:
            for _ in range(num_steps):
                t0 = time.perf_counter()
                loss = self.train_step()
                wall_ms = (time.perf_counter() - t0) * 1000.0
                row = (self.step, loss, self.cfg.lr, wall_ms)
                self.log_rows.append(row)
                if log_file:
                    log_file.write(f"{row[0]},{row[1]:.6f},{row[2]:g},{row[3]:.1f}\n")
                if progress and self.step % self.cfg.log_every == 0:
                    progress(self.step, loss)
                if (
                    checkpoint_path
                    and self.cfg.checkpoint_every
                    and self.step % self.cfg.checkpoint_every == 0
                ):
                    save_checkpoint(checkpoint_path, self)
        finally:
            if log_file:
                log_file.close()
        return self.log_rows


# -- checkpoint file format ----------------------------------------------------

_CKPT_MAGIC = b"BPCK"
_CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def _write_tensor(f, name, arr):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype.newbyteorder("=")], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode()
    tag, rank = struct.unpack("<BB", f.read(2))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    dtype = _TAG_DTYPES[tag]
    data = np.frombuffer(f.read(int(np.prod(dims)) * dtype.itemsize), dtype=dtype.newbyteorder("<"))
    return name, data.astype(dtype).reshape(dims)


def save_checkpoint(path, trainer):
    net = trainer.net
    header = {
        "step": trainer.step,
        "adam_step": trainer.adam.step,
        "train": trainer.cfg.to_dict(),
        "net": net.cfg.to_dict(),
        "num_classes": net.num_classes,
        "max_instances": net.max_instances,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tensors = []
    for name, p in net.params.items():
        tensors.append((f"param/{name}", p.data))
        tensors.append((f"ema/{name}", trainer.ema[name]))
        if name in trainer.adam.m:
            tensors.append((f"adam_m/{name}", trainer.adam.m[name]))
            tensors.append((f"adam_v/{name}", trainer.adam.v[name]))
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<B", _CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, np.ascontiguousarray(arr))


def read_checkpoint(path):
    """Raw checkpoint contents: (header dict, {record name: array})."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blen).decode())
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            tensors[name] = arr
    return header, tensors


def build_net_from_header(header, seed=0):
    net_cfg = NetConfig(**header["net"])
    codec = BitCodecConfig(**header["train"]["codec"])
    return MaskDenoiser(
        net_cfg, codec, header["num_classes"], header["max_instances"], seed=seed
    )


def load_checkpoint(path, dataset, sched=None):
    """Reconstruct a Trainer that resumes bit-exactly from the saved step."""
    header, tensors = read_checkpoint(path)
    net = build_net_from_header(header)
    cfg = TrainConfig.from_dict(header["train"])
    trainer = Trainer(net, cfg, dataset, sched=sched)
    net.load_state({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    trainer.ema = {k[len("ema/"):]: v.copy() for k, v in tensors.items() if k.startswith("ema/")}
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            trainer.adam.m[k[len("adam_m/"):]] = v.copy()
        elif k.startswith("adam_v/"):
            trainer.adam.v[k[len("adam_v/"):]] = v.copy()
    trainer.step = header["step"]
    trainer.adam.step = header["adam_step"]
    return trainer


def video_finetune(checkpoint_path, video_dataset, cfg):
    """Warm-start a video model from an image checkpoint.

    The decoder input projection grows zero-initialized rows for the past-mask
    channels, so at step 0 the video model reproduces the image model exactly.
    """
    header, tensors = read_checkpoint(checkpoint_path)
    if cfg.past_frames < 1:
        raise ValueError("video_finetune needs past_frames >= 1")
    old_codec = BitCodecConfig(**header["train"]["codec"])
    if (old_codec.class_bits, old_codec.instance_bits, old_codec.scale) != (
        cfg.codec.class_bits, cfg.codec.instance_bits, cfg.codec.scale,
    ):
        raise ValueError("checkpoint codec config incompatible with video config")
    sample_frames, sample_masks, _ = video_dataset[0]
    if sample_masks[0].num_classes != header["num_classes"] or (
        sample_masks[0].max_instances != header["max_instances"]
    ):
        raise ValueError("video dataset class/instance space incompatible with checkpoint")

    net_kwargs = dict(header["net"])
    net_kwargs["use_past_masks"] = True
    net_kwargs["past_frames"] = cfg.past_frames
    net = MaskDenoiser(
        NetConfig(**net_kwargs), cfg.codec, header["num_classes"], header["max_instances"]
    )
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    old_in = state["dec/in/w"]
    extra = cfg.past_frames * cfg.codec.total_bits
    state["dec/in/w"] = np.concatenate(
        [old_in, np.zeros((extra, old_in.shape[1]), dtype=old_in.dtype)], axis=0
    )
    net.load_state(state)
    if not cfg.video_mode:
        raise ValueError("video_finetune requires cfg.video_mode")
    return Trainer(net, cfg, video_dataset)
