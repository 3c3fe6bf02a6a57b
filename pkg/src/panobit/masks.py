"""Panoptic mask data model and the analog-bit codec.

A mask is two integer grids: a class channel in [0, C) and an instance
channel in [0, K], where class 0 is the null label and instance 0 marks
"no instance" (stuff and null pixels). Masks convert to real-valued
analog bits in {-b, +b} for diffusion, LSB-first per channel, class bits
before instance bits.
"""

import struct

import numpy as np


class PanopticMask:
    """H x W grid of (class_id, instance_id) pairs with capacity bounds C, K."""

    def __init__(self, class_ids, instance_ids, num_classes, max_instances):
        self.class_ids = np.asarray(class_ids, dtype=np.uint16)
        self.instance_ids = np.asarray(instance_ids, dtype=np.uint16)
        self.num_classes = int(num_classes)
        self.max_instances = int(max_instances)
        self.validate()

    @property
    def shape(self):
        return self.class_ids.shape

    def validate(self):
        if self.class_ids.shape != self.instance_ids.shape or self.class_ids.ndim != 2:
            raise ValueError(
                f"mask channels must be equal 2-D shapes, got {self.class_ids.shape} "
                f"and {self.instance_ids.shape}"
            )
        if self.num_classes < 1 or self.max_instances < 0:
            raise ValueError("need num_classes >= 1 and max_instances >= 0")
        if self.class_ids.max(initial=0) >= self.num_classes:
            raise ValueError(
                f"class id {self.class_ids.max()} out of range [0, {self.num_classes})"
            )
        if self.instance_ids.max(initial=0) > self.max_instances:
            raise ValueError(
                f"instance id {self.instance_ids.max()} out of range [0, {self.max_instances}]"
            )
        if np.any(self.instance_ids[self.class_ids == 0] != 0):
            raise ValueError("null-class pixels must carry instance id 0")

    def copy(self):
        return PanopticMask(
            self.class_ids.copy(), self.instance_ids.copy(), self.num_classes, self.max_instances
        )

    def __eq__(self, other):
        return (
            isinstance(other, PanopticMask)
            and self.num_classes == other.num_classes
            and self.max_instances == other.max_instances
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.instance_ids, other.instance_ids)
        )

    def __repr__(self):
        h, w = self.shape
        return f"PanopticMask({h}x{w}, C={self.num_classes}, K={self.max_instances})"


class BitCodecConfig:
    """Bit widths and input scaling for the analog-bit encoding."""

    def __init__(self, class_bits=4, instance_bits=4, scale=0.1):
        if class_bits < 1 or instance_bits < 1:
            raise ValueError("bit counts must be >= 1")
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.class_bits = int(class_bits)
        self.instance_bits = int(instance_bits)
        self.scale = float(scale)

    @property
    def total_bits(self):
        return self.class_bits + self.instance_bits

    def check_capacity(self, num_classes, max_instances):
        if 2**self.class_bits < num_classes:
            raise ValueError(f"{self.class_bits} class bits cannot hold {num_classes} classes")
        if 2**self.instance_bits < max_instances + 1:
            raise ValueError(
                f"{self.instance_bits} instance bits cannot hold ids up to {max_instances}"
            )


def int2bit(x, n):
    """Integer grid -> binary grid with a trailing LSB-first bit axis of size n."""
    x = np.asarray(x)
    if np.any(x < 0) or np.any(x >= 2**n):
        raise ValueError(f"values must lie in [0, 2^{n}); got range [{x.min()}, {x.max()}]")
    shifts = np.arange(n, dtype=np.int64)
    return ((x.astype(np.int64)[..., None] >> shifts) & 1).astype(np.uint8)


def bit2int(bits):
    """Inverse of int2bit: LSB-first bit axis -> integer grid."""
    bits = np.asarray(bits)
    n = bits.shape[-1]
    weights = (1 << np.arange(n, dtype=np.int64))
    return (bits.astype(np.int64) * weights).sum(axis=-1)


def encode_analog(mask, cfg, dtype=np.float32):
    """Mask -> H x W x (n_c + n_i) analog bits, each exactly -b or +b."""
    cfg.check_capacity(mask.num_classes, mask.max_instances)
    cbits = int2bit(mask.class_ids, cfg.class_bits)
    ibits = int2bit(mask.instance_ids, cfg.instance_bits)
    bits = np.concatenate([cbits, ibits], axis=-1).astype(dtype)
    return (bits * 2.0 - 1.0) * dtype(cfg.scale)


def decode_analog(x, cfg, num_classes, max_instances):
    """Analog bits -> mask: threshold at 0, then bit2int per channel.

    Decoded values outside [0, C) / [0, K] map to the null sink (class 0,
    instance 0); null-class pixels always get instance 0.
    """
    x = np.asarray(x)
    if x.shape[-1] != cfg.total_bits:
        raise ValueError(f"expected {cfg.total_bits} bit channels, got {x.shape[-1]}")
    bits = (x > 0).astype(np.uint8)
    cls = bit2int(bits[..., : cfg.class_bits])
    inst = bit2int(bits[..., cfg.class_bits :])
    cls[cls >= num_classes] = 0
    inst[inst > max_instances] = 0
    inst[cls == 0] = 0
    return PanopticMask(cls, inst, num_classes, max_instances)


def permute_instance_ids(mask, rng):
    """Randomly re-assign the present nonzero instance ids injectively into [1, K].

    The pixel partition into segments and the class channel are untouched.
    """
    present = np.unique(mask.instance_ids)
    present = present[present > 0]
    k = mask.max_instances
    if len(present) > k:
        raise ValueError(f"{len(present)} instances exceed capacity K={k}")
    lut = np.zeros(k + 1, dtype=np.uint16)
    lut[present] = rng.permutation(np.arange(1, k + 1, dtype=np.uint16))[: len(present)]
    return PanopticMask(
        mask.class_ids.copy(), lut[mask.instance_ids], mask.num_classes, mask.max_instances
    )


def filter_small_instances(mask, min_pixels):
    """Remove instances smaller than min_pixels (their pixels become null)."""
    if min_pixels < 0:
        raise ValueError(f"min_pixels must be >= 0, got {min_pixels}")
    if min_pixels == 0:
        return mask.copy()
    counts = np.bincount(mask.instance_ids.ravel(), minlength=mask.max_instances + 1)
    small = np.flatnonzero(counts[1:] < min_pixels) + 1
    small = small[counts[small] > 0]
    cls = mask.class_ids.copy()
    inst = mask.instance_ids.copy()
    drop = np.isin(inst, small)
    cls[drop] = 0
    inst[drop] = 0
    return PanopticMask(cls, inst, mask.num_classes, mask.max_instances)


_MASK_MAGIC = b"PANM"
_MASK_VERSION = 1


def save_mask(path, mask):
    """Bit-exact mask file: magic, version, u32-LE H W C K, u16-LE grids."""
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(_MASK_MAGIC)
        f.write(struct.pack("<B", _MASK_VERSION))
        f.write(struct.pack("<4I", h, w, mask.num_classes, mask.max_instances))
        f.write(mask.class_ids.astype("<u2").tobytes())
        f.write(mask.instance_ids.astype("<u2").tobytes())


def load_mask(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MASK_MAGIC:
            raise ValueError(f"{path}: not a mask file (magic {magic!r})")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _MASK_VERSION:
            raise ValueError(f"{path}: unsupported mask file version {version}")
        h, w, c, k = struct.unpack("<4I", f.read(16))
        cls = np.frombuffer(f.read(h * w * 2), dtype="<u2").reshape(h, w)
        inst = np.frombuffer(f.read(h * w * 2), dtype="<u2").reshape(h, w)
    return PanopticMask(cls, inst, c, k)


def _hash32(x):
    # splitmix-style avalanche; fixed so palettes are stable across runs.
    x = (x ^ (x >> 16)) * np.uint64(0x7FEB352D) & np.uint64(0xFFFFFFFF)
    x = (x ^ (x >> 15)) * np.uint64(0x846CA68B) & np.uint64(0xFFFFFFFF)
    return (x ^ (x >> 16)) & np.uint64(0xFFFFFFFF)


def segment_color(class_id, instance_id):
    """Deterministic RGB for a (class, instance) pair; null maps to black."""
    if class_id == 0:
        return (0, 0, 0)
    key = np.uint64(class_id) << np.uint64(16) | np.uint64(instance_id)
    h = int(_hash32(key))
    # keep channels away from full black so segments stay visible
    return (32 + (h & 0xDF), 32 + ((h >> 8) & 0xDF), 32 + ((h >> 16) & 0xDF))


def mask_to_rgb(mask):
    """H x W x 3 uint8 visualization via the fixed (class, instance) palette."""
    h, w = mask.shape
    out = np.zeros((h, w, 3), dtype=np.uint8)
    pairs = np.stack([mask.class_ids, mask.instance_ids], axis=-1).reshape(-1, 2)
    uniq = np.unique(pairs, axis=0)
    flat = out.reshape(-1, 3)
    keys = pairs[:, 0].astype(np.uint32) * 65536 + pairs[:, 1]
    for cid, iid in uniq:
        cid, iid = int(cid), int(iid)
        flat[keys == cid * 65536 + iid] = segment_color(cid, iid)
    return out
