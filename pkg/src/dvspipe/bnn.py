"""Binary-weight convolutional detector and a small CPU trainer.

Inference follows the integer formulation exactly: with inputs in {0,1} and
weights in {-1,+1} split into disjoint positive/negative masks,

    sum_i x_i * w_i == popcount(x AND w_plus) - popcount(x AND w_minus)

so the convolution runs on bit-packed patches with AND + popcount, scaled
per filter by a positive alpha, through ReLU, whole-map max-pooling, and a
real-valued linear readout against a threshold.

Training keeps latent real weights, binarizes them on the forward pass, and
backpropagates with the straight-through estimator (identity inside the
clip region) plus the chain-rule term through alpha = mean |latent|.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .filter import FilteredFrame

MODEL_MAGIC = b"BNN1"
ALPHA_FLOOR = 1e-12


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class DetectorModel:
    """Binarized detector: masks are (n_filters, 2, k, k) boolean arrays."""

    w_plus: np.ndarray
    w_minus: np.ndarray
    alpha: np.ndarray
    readout: np.ndarray
    bias: float
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.w_plus.shape != self.w_minus.shape or self.w_plus.ndim != 4:
            raise ModelError(f"bad mask shapes {self.w_plus.shape}/{self.w_minus.shape}")
        if self.w_plus.shape[1] != 2:
            raise ModelError("masks must have 2 input channels")
        if np.any(self.w_plus & self.w_minus):
            raise ModelError("w_plus and w_minus overlap")
        if not np.all(self.w_plus | self.w_minus):
            raise ModelError("w_plus and w_minus do not cover every weight")
        if np.any(self.alpha <= 0):
            raise ModelError("alpha must be positive")
        if self.alpha.shape != (self.n_filters,) or self.readout.shape != (self.n_filters,):
            raise ModelError("alpha/readout length must match filter count")

    @property
    def n_filters(self) -> int:
        return self.w_plus.shape[0]

    @property
    def kernel(self) -> int:
        return self.w_plus.shape[2]

    def packed_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """Bit-pack each filter's mask into whole uint64 lanes."""
        f = self.n_filters
        plus = np.packbits(self.w_plus.reshape(f, -1), axis=1)
        minus = np.packbits(self.w_minus.reshape(f, -1), axis=1)
        return _to_lanes(plus), _to_lanes(minus)


@dataclass(frozen=True)
class Detection:
    score: float
    decision: bool
    activations: np.ndarray  # per-filter max of ReLU(alpha * conv)


@dataclass
class LatentModel:
    """Real-valued training twin of DetectorModel."""

    filters: np.ndarray  # (n_filters, 2, k, k) float64
    readout: np.ndarray
    bias: float


@dataclass(frozen=True)
class TrainConfig:
    n_filters: int = 200
    kernel: int = 10
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    threshold: float = 0.0


def _frame_planes(frame) -> np.ndarray:
    if isinstance(frame, FilteredFrame):
        return np.stack([frame.h_pooled, frame.v_pooled])
    arr = np.asarray(frame, dtype=bool)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ModelError(f"expected (2, H, W) planes, got {arr.shape}")
    return arr


def _packed_patches_u8(planes: np.ndarray, k: int) -> np.ndarray:
    """All k x k x 2 patches, bit-packed per row: (n_offsets, ceil(2k*k/8))."""
    _, rows, cols = planes.shape
    if rows < k or cols < k:
        raise ModelError(f"frame {rows}x{cols} smaller than kernel {k}")
    windows = np.lib.stride_tricks.sliding_window_view(planes, (k, k), axis=(1, 2))
    # (2, out_r, out_c, k, k) -> (out_r*out_c, 2*k*k) matching mask bit order
    patches = windows.transpose(1, 2, 0, 3, 4).reshape((rows - k + 1) * (cols - k + 1), -1)
    return np.packbits(patches, axis=1)


def _to_lanes(packed: np.ndarray) -> np.ndarray:
    """Zero-pad packed rows to whole uint64 lanes and reinterpret."""
    lane_bytes = -packed.shape[1] % 8
    if lane_bytes:
        pad = np.zeros((packed.shape[0], lane_bytes), dtype=np.uint8)
        packed = np.hstack([packed, pad])
    return packed.view(np.uint64)


def binary_conv_forward(frame, model: DetectorModel) -> np.ndarray:
    """Integer activation maps, shape (n_filters, H-k+1, W-k+1)."""
    planes = _frame_planes(frame)
    k = model.kernel
    _, rows, cols = planes.shape
    patches = _to_lanes(_packed_patches_u8(planes, k))  # (n, lanes)
    plus, minus = model.packed_masks()  # (f, lanes)
    pos = np.bitwise_count(patches[None, :, :] & plus[:, None, :]).sum(
        axis=2, dtype=np.int32
    )
    neg = np.bitwise_count(patches[None, :, :] & minus[:, None, :]).sum(
        axis=2, dtype=np.int32
    )
    return (pos - neg).reshape(model.n_filters, rows - k + 1, cols - k + 1)


def detect(frame, model: DetectorModel) -> Detection:
    """Score one frame: max of ReLU(alpha * activation), linear readout."""
    acts = binary_conv_forward(frame, model)
    peak = acts.reshape(model.n_filters, -1).max(axis=1)
    m = model.alpha * np.maximum(peak, 0)
    score = float(model.readout @ m + model.bias)
    return Detection(score=score, decision=score >= model.threshold, activations=m)


def binarize(latent: LatentModel, threshold: float = 0.0) -> DetectorModel:
    """Sign-split the latent filters; alpha is the mean absolute weight."""
    filters = latent.filters
    if not np.all(np.isfinite(filters)):
        raise ModelError("latent filters contain non-finite values")
    alpha = np.abs(filters).mean(axis=(1, 2, 3))
    return DetectorModel(
        w_plus=filters >= 0,
        w_minus=filters < 0,
        alpha=np.maximum(alpha, ALPHA_FLOOR),
        readout=latent.readout.astype(np.float64).copy(),
        bias=float(latent.bias),
        threshold=threshold,
    )


def _patch_tensor(frames, k: int) -> np.ndarray:
    """(n_frames, n_offsets, packed_bytes) uint8; the trainer's working set.

    Kept bit-packed so a large corpus fits in RAM; minibatches expand to
    float32 on the fly.
    """
    return np.stack([_packed_patches_u8(_frame_planes(f), k) for f in frames])


def _forward_latent(
    patches: np.ndarray, signs: np.ndarray, alpha: np.ndarray, readout: np.ndarray, bias: float
):
    """Batched training forward. patches (B, N, D) float32, signs (F, D).

    The matmul sums only +-1 terms, so the float32 accumulation is exact and
    matches the integer popcount formulation bit for bit.
    """
    conv = patches @ signs.T.astype(np.float32)  # (B, N, F) exact integers
    conv = conv.transpose(0, 2, 1)  # (B, F, N)
    best = conv.argmax(axis=2)  # first max offset
    b_idx = np.arange(conv.shape[0])[:, None]
    f_idx = np.arange(conv.shape[1])[None, :]
    peak = conv[b_idx, f_idx, best].astype(np.float64)  # (B, F)
    pre = alpha[None, :] * peak
    m = np.maximum(pre, 0.0)
    score = m @ readout + bias
    return conv, best, peak, m, score


def train(frames, labels, config: TrainConfig = TrainConfig()):
    """Adam/STE training; returns (DetectorModel, per-epoch mean loss).

    Deterministic for a fixed config: initialization, shuffling, and every
    arithmetic step depend only on the seed and the dataset.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    if n == 0 or len(frames) != n:
        raise ModelError("frames and labels must be equal-length and non-empty")
    if labels.min() == labels.max():
        raise ModelError("training needs both classes present")

    k = config.kernel
    f = config.n_filters
    rng = np.random.default_rng(config.seed)
    packed = _patch_tensor(frames, k)
    dim = 2 * k * k
    nbytes = packed.shape[2]

    filters = rng.normal(0.0, 0.1, size=(f, dim))
    readout = rng.normal(0.0, 0.1, size=f)
    bias = 0.0

    adam_m = [np.zeros_like(filters), np.zeros_like(readout), 0.0]
    adam_v = [np.zeros_like(filters), np.zeros_like(readout), 0.0]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = []

    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = (
                np.unpackbits(packed[batch].reshape(-1, nbytes), axis=1, count=dim)
                .reshape(len(batch), -1, dim)
                .astype(np.float32)
            )
            y = labels[batch]

            signs = np.where(filters >= 0, 1.0, -1.0)
            alpha = np.maximum(np.abs(filters).mean(axis=1), ALPHA_FLOOR)
            conv, best, peak, m, score = _forward_latent(x, signs, alpha, readout, bias)

            # logistic loss; clip the exponent for stability
            z = np.clip(score, -60.0, 60.0)
            prob = 1.0 / (1.0 + np.exp(-z))
            epoch_loss += float(
                np.sum(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * y)
            )
            dscore = prob - y  # (B,)

            grad_readout = dscore @ m
            grad_bias = float(dscore.sum())
            dm = dscore[:, None] * readout[None, :]  # (B, F)
            gate = (alpha[None, :] * peak) > 0
            dpeak = dm * gate  # d(loss)/d(alpha*peak) applied below
            grad_alpha = (dpeak * peak).sum(axis=0)

            # gradient wrt the effective +-1 weights lands on the argmax patch
            dconv = dpeak * alpha[None, :]  # (B, F)
            b_idx = np.arange(x.shape[0])[:, None]
            sel = x[b_idx, best]  # (B, F, D) patches at each filter's argmax
            grad_eff = np.einsum(
                "bf,bfd->fd", dconv, sel.astype(np.float64), optimize=True
            )

            # straight-through: identity inside |w| <= 1, plus the alpha chain
            ste = (np.abs(filters) <= 1.0).astype(np.float64)
            grad_filters = grad_eff * alpha[:, None] * ste + (
                np.sign(filters) * (grad_alpha / dim)[:, None]
            )

            step += 1
            scale = np.sqrt(1 - beta2**step) / (1 - beta1**step)
            for slot, grad in ((0, grad_filters), (1, grad_readout)):
                adam_m[slot] = beta1 * adam_m[slot] + (1 - beta1) * grad
                adam_v[slot] = beta2 * adam_v[slot] + (1 - beta2) * grad**2
                target = filters if slot == 0 else readout
                target -= config.lr * scale * adam_m[slot] / (np.sqrt(adam_v[slot]) + eps)
            adam_m[2] = beta1 * adam_m[2] + (1 - beta1) * grad_bias
            adam_v[2] = beta2 * adam_v[2] + (1 - beta2) * grad_bias**2
            bias -= config.lr * scale * adam_m[2] / (np.sqrt(adam_v[2]) + eps)
        losses.append(epoch_loss / n)

    latent = LatentModel(
        filters=filters.reshape(f, 2, k, k), readout=readout, bias=bias
    )
    return binarize(latent, threshold=config.threshold), losses


def save_model(path, model: DetectorModel) -> None:
    f, _, k, _ = model.w_plus.shape
    header = MODEL_MAGIC + struct.pack("<III", f, 2, k)
    plus = np.packbits(model.w_plus.reshape(-1))
    minus = np.packbits(model.w_minus.reshape(-1))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(plus.tobytes())
        fh.write(minus.tobytes())
        fh.write(model.alpha.astype("<f8").tobytes())
        fh.write(model.readout.astype("<f8").tobytes())
        fh.write(struct.pack("<dd", model.bias, model.threshold))


def load_model(path) -> DetectorModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ModelError(f"bad magic {data[:4]!r}")
    f, c, k = struct.unpack_from("<III", data, 4)
    if c != 2:
        raise ModelError(f"unsupported channel count {c}")
    nbits = f * c * k * k
    nbytes = (nbits + 7) // 8
    pos = 16
    shape = (f, c, k, k)

    def unpack_mask(offset: int) -> np.ndarray:
        raw = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
        return np.unpackbits(raw, count=nbits).astype(bool).reshape(shape)

    w_plus = unpack_mask(pos)
    w_minus = unpack_mask(pos + nbytes)
    pos += 2 * nbytes
    alpha = np.frombuffer(data, dtype="<f8", count=f, offset=pos).copy()
    pos += 8 * f
    readout = np.frombuffer(data, dtype="<f8", count=f, offset=pos).copy()
    pos += 8 * f
    bias, threshold = struct.unpack_from("<dd", data, pos)
    return DetectorModel(
        w_plus=w_plus,
        w_minus=w_minus,
        alpha=alpha,
        readout=readout,
        bias=bias,
        threshold=threshold,
    )
