"""Self-contained 2D U-Net on numpy with exact analytic gradients.

Encoder levels apply two 3x3 same-padded convolutions with ReLU followed by
2x2 max pooling; the bottleneck mirrors a level without pooling; decoder
levels do 2x nearest-neighbor upsampling, a 3x3 conv, skip concatenation and
two more conv+ReLU; a final 1x1 convolution produces class logits. No batch
normalization, so forward/backward are exact and deterministic for a fixed
seed. Upsampling is nearest+conv rather than transposed conv to avoid
checkerboard artifacts and keep the backward pass simple.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    InvalidConfigError,
    MissingActivationsError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"MPSEG1"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    num_classes: int
    depth: int = 2
    base_filters: int = 8
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise InvalidConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise InvalidConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise InvalidConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.kernel_size != 3:
            raise InvalidConfigError("kernel_size is fixed at 3")
        if self.seed < 0:
            raise InvalidConfigError("seed must be nonnegative")


class _Conv2D:
    """Same-padded convolution with optional fused ReLU, stride 1.

    Activations flow channels-last internally (batch, row, col, channel):
    im2col then gathers contiguous channel runs and its reshape to the GEMM
    operand is free. The column matrix is cached from forward so the
    weight-gradient GEMM in backward reuses it instead of re-gathering.
    Weights keep the canonical (out, in, kh, kw) layout for checkpoints.
    """

    def __init__(self, name, in_ch, out_ch, ksize, rng, dtype, relu):
        self.name = name
        self.ksize = ksize
        self.pad = (ksize - 1) // 2
        self.relu = relu
        fan_in = in_ch * ksize * ksize
        self.w = (rng.standard_normal((out_ch, in_ch, ksize, ksize)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._mask = None
        self._shape = None

    @staticmethod
    def _im2col(x, ksize, pad):
        # (B, H, W, C) -> (B*H*W, k*k*C); ordering matches w.transpose(2, 3, 1, 0).
        # Padding is folded into the gather bounds so no padded copy is made.
        b, hin, win_, c = x.shape
        h = hin + 2 * pad - ksize + 1
        w = win_ + 2 * pad - ksize + 1
        if ksize == 1:
            return x.reshape(b * h * w, c), (b, h, w)
        cols = np.zeros((b, h, w, ksize, ksize, c), dtype=x.dtype)
        for dh in range(ksize):
            h_lo = max(0, pad - dh)
            h_hi = min(h, hin + pad - dh)
            for dw in range(ksize):
                w_lo = max(0, pad - dw)
                w_hi = min(w, win_ + pad - dw)
                cols[:, h_lo:h_hi, w_lo:w_hi, dh, dw, :] = x[
                    :, h_lo + dh - pad : h_hi + dh - pad, w_lo + dw - pad : w_hi + dw - pad, :
                ]
        return cols.reshape(b * h * w, ksize * ksize * c), (b, h, w)

    def forward(self, x, train):
        cols, (b, h, w) = self._im2col(x, self.ksize, self.pad)
        out_ch = self.w.shape[0]
        wmat = self.w.transpose(2, 3, 1, 0).reshape(-1, out_ch)
        y = cols @ wmat
        y += self.b
        if self.relu:
            mask = y > 0
            y *= mask
            if train:
                self._mask = mask
        if train:
            self._cols = cols
            self._shape = (b, h, w)
        return y.reshape(b, h, w, out_ch)

    def backward(self, g, need_dx=True):
        if self._cols is None:
            raise MissingActivationsError(f"{self.name}: backward without train-mode forward")
        b, h, w = self._shape
        out_ch = self.w.shape[0]
        g_mat = g.reshape(b * h * w, out_ch)
        if self.relu:
            g_mat = g_mat * self._mask
        k = self.ksize
        gw = (self._cols.T @ g_mat).reshape(k, k, -1, out_ch)
        self.gw += gw.transpose(3, 2, 0, 1)
        self.gb += g_mat.sum(axis=0)
        if not need_dx:
            return None
        # full correlation with the flipped kernel, again as im2col + GEMM
        gcols, _ = self._im2col(g_mat.reshape(b, h, w, out_ch), k, k - 1 - self.pad)
        wflip = self.w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * out_ch, -1)
        dx = gcols @ wflip
        return dx.reshape(b, h, w, -1)

    def clear_cache(self):
        self._cols = None
        self._mask = None
        self._shape = None


class _MaxPool2:
    """2x2 max pooling, stride 2; ties route to the first maximum."""

    def __init__(self):
        self._arg = None
        self._in_shape = None

    def forward(self, x, train):
        b, h, w, c = x.shape
        r = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4, c)
        arg = r.argmax(axis=3)
        y = np.take_along_axis(r, arg[:, :, :, None], axis=3)[:, :, :, 0]
        if train:
            self._arg = arg
            self._in_shape = x.shape
        return y

    def backward(self, g):
        if self._arg is None:
            raise MissingActivationsError("maxpool backward without train-mode forward")
        b, h, w, c = self._in_shape
        canvas = np.zeros((b, h // 2, w // 2, 4, c), dtype=g.dtype)
        np.put_along_axis(canvas, self._arg[:, :, :, None], g[:, :, :, None], axis=3)
        return canvas.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)

    def clear_cache(self):
        self._arg = None
        self._in_shape = None


class _UpsampleNearest2:
    def forward(self, x, train):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, g):
        b, h, w, c = g.shape
        return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))

    def clear_cache(self):
        pass


class UNet:
    """Network state: layers with weights and matching gradient buffers."""

    def __init__(self, config: UNetConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        base = config.base_filters
        k = config.kernel_size
        d = config.depth

        def conv(name, cin, cout, ksize=k, relu=True):
            return _Conv2D(name, cin, cout, ksize, rng, self.dtype, relu)

        self.enc_a, self.enc_b, self.pools = [], [], []
        cin = config.in_channels
        for lvl in range(d):
            cout = base * 2**lvl
            self.enc_a.append(conv(f"enc{lvl}.conv1", cin, cout))
            self.enc_b.append(conv(f"enc{lvl}.conv2", cout, cout))
            self.pools.append(_MaxPool2())
            cin = cout
        cb = base * 2**d
        self.bott_a = conv("bottleneck.conv1", cin, cb)
        self.bott_b = conv("bottleneck.conv2", cb, cb)
        self.ups = [None] * d
        self.up_convs = [None] * d
        self.dec_a = [None] * d
        self.dec_b = [None] * d
        for lvl in reversed(range(d)):
            cout = base * 2**lvl
            self.ups[lvl] = _UpsampleNearest2()
            self.up_convs[lvl] = conv(f"dec{lvl}.upconv", cout * 2, cout)
            self.dec_a[lvl] = conv(f"dec{lvl}.conv1", cout * 2, cout)
            self.dec_b[lvl] = conv(f"dec{lvl}.conv2", cout, cout)
        self.head = conv("head", base, config.num_classes, ksize=1, relu=False)
        self._skip_channels = [base * 2**lvl for lvl in range(d)]
        self._forward_ready = False

    # --- bookkeeping ---

    def _conv_layers(self):
        layers = []
        for a, b in zip(self.enc_a, self.enc_b):
            layers.extend([a, b])
        layers.extend([self.bott_a, self.bott_b])
        for lvl in reversed(range(self.config.depth)):
            layers.extend([self.up_convs[lvl], self.dec_a[lvl], self.dec_b[lvl]])
        layers.append(self.head)
        return layers

    def parameters(self):
        """Ordered (name, weights, gradient) triples; arrays are live references."""
        out = []
        for layer in self._conv_layers():
            out.append((layer.name + ".weight", layer.w, layer.gw))
            out.append((layer.name + ".bias", layer.b, layer.gb))
        return out

    def zero_grads(self):
        for _, _, g in self.parameters():
            g[...] = 0

    def get_weights(self):
        return [p.copy() for _, p, _ in self.parameters()]

    def set_weights(self, weights):
        params = self.parameters()
        if len(weights) != len(params):
            raise ShapeError(f"expected {len(params)} arrays, got {len(weights)}")
        for (_, p, _), val in zip(params, weights):
            np.copyto(p, val)

    def astype(self, dtype) -> "UNet":
        other = UNet(self.config, dtype=dtype)
        other.set_weights([p.astype(dtype) for _, p, _ in self.parameters()])
        return other

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())

    # --- computation ---

    def forward(self, batch, train_mode=False):
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim != 4:
            raise ShapeError(f"batch must be 4D (batch, channel, row, col), got ndim={x.ndim}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"batch has {x.shape[1]} channels, config expects {self.config.in_channels}")
        m = 2**self.config.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {m}; pad first")
        assert np.isfinite(x).all(), "non-finite values in input batch"

        skips = []
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # internals run channels-last
        for lvl in range(self.config.depth):
            h = self.enc_a[lvl].forward(h, train_mode)
            h = self.enc_b[lvl].forward(h, train_mode)
            skips.append(h)
            h = self.pools[lvl].forward(h, train_mode)
        h = self.bott_a.forward(h, train_mode)
        h = self.bott_b.forward(h, train_mode)
        for lvl in reversed(range(self.config.depth)):
            h = self.ups[lvl].forward(h, train_mode)
            h = self.up_convs[lvl].forward(h, train_mode)
            h = np.concatenate([skips[lvl], h], axis=3)
            h = self.dec_a[lvl].forward(h, train_mode)
            h = self.dec_b[lvl].forward(h, train_mode)
        logits = self.head.forward(h, train_mode)
        self._forward_ready = train_mode
        return logits.transpose(0, 3, 1, 2)

    def backward(self, loss_grad_wrt_logits):
        """Accumulate exact parameter gradients; requires a train-mode forward."""
        if not self._forward_ready:
            raise MissingActivationsError("backward requires a preceding forward(train_mode=True)")
        g = np.asarray(loss_grad_wrt_logits, dtype=self.dtype)
        g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g = self.head.backward(g)
        skip_grads = [None] * self.config.depth
        for lvl in range(self.config.depth):
            g = self.dec_b[lvl].backward(g)
            g = self.dec_a[lvl].backward(g)
            sc = self._skip_channels[lvl]
            skip_grads[lvl] = g[..., :sc]
            g = self.up_convs[lvl].backward(np.ascontiguousarray(g[..., sc:]))
            g = self.ups[lvl].backward(g)
        g = self.bott_b.backward(g)
        g = self.bott_a.backward(g)
        for lvl in reversed(range(self.config.depth)):
            g = self.pools[lvl].backward(g)
            g = g + skip_grads[lvl]
            g = self.enc_b[lvl].backward(g)
            # the input gradient of the first layer has no consumer
            g = self.enc_a[lvl].backward(g, need_dx=lvl > 0)

    def clear_caches(self):
        for layer in self._conv_layers():
            layer.clear_cache()
        for layer in self.pools:
            layer.clear_cache()
        self._forward_ready = False


def build_unet(config: UNetConfig, dtype=np.float32) -> UNet:
    """He-initialized network, deterministic for a fixed config seed."""
    return UNet(config, dtype=dtype)


def softmax(logits) -> np.ndarray:
    """Per-pixel class softmax with max subtraction for stability."""
    z = np.asarray(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pad_to_pool_multiple(batch: np.ndarray, depth: int):
    """Zero-pad spatial dims up to the next multiple of 2**depth.

    Returns the padded batch and the original (rows, cols) for cropping.
    """
    m = 2**depth
    b = np.asarray(batch)
    h, w = b.shape[2], b.shape[3]
    ph = (-h) % m
    pw = (-w) % m
    if ph or pw:
        b = np.pad(b, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return b, (h, w)


def _xent_loss_and_grad(probs, labels):
    # unit-weight cross entropy; mirrors training.cross_entropy_loss
    n_pix = probs.shape[0] * probs.shape[2] * probs.shape[3]
    idx = np.arange(probs.shape[1])[None, :, None, None] == labels[:, None]
    p_true = np.where(idx, probs, 0.0).sum(axis=1)
    loss = -np.log(p_true + 1e-12).sum() / n_pix
    grad = (probs - idx) / n_pix
    return loss, grad


def _loss_and_decisions(net64: UNet, x, labels):
    """Loss plus the ReLU masks and pool routings of this forward pass."""
    logits = net64.forward(x, train_mode=True)
    loss = _xent_loss_and_grad(softmax(logits), labels)[0]
    decisions = []
    for layer in net64._conv_layers():
        if layer.relu:
            decisions.append(layer._mask.copy())
    for pool in net64.pools:
        decisions.append(pool._arg.copy())
    return loss, decisions


def gradient_check(net: UNet, batch, labels, epsilon: float = 1e-3,
                   n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    Runs entirely in float64 on a jittered copy of the network (biases
    initialize to exactly zero, which would park dead-region ReLU kinks
    exactly at the evaluation point). The loss of a ReLU/max-pool net is
    only piecewise smooth: a central-difference stencil that crosses an
    activation-pattern boundary does not estimate the one-sided derivative
    the analytic pass computes, so samples whose +/-epsilon forwards disagree
    on any ReLU mask or pool routing are skipped and redrawn. A wrong
    backward pass is still caught: it is wrong at every parameter, including
    all smooth-stencil ones.
    """
    if n_samples <= 0:
        return 0.0
    net64 = net.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    for _, p, _ in net64.parameters():
        p += rng.uniform(-0.05, 0.05, p.shape)

    net64.zero_grads()
    logits = net64.forward(x, train_mode=True)
    _, dlogits = _xent_loss_and_grad(softmax(logits), labels)
    net64.backward(dlogits)
    params = net64.parameters()
    analytic_grads = [g.copy() for _, _, g in params]

    sizes = np.array([p.size for _, p, _ in params])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    order = rng.permutation(total)

    max_rel = 0.0
    accepted = 0
    for flat in order:
        if accepted >= min(n_samples, total):
            break
        li = int(np.searchsorted(bounds, flat, side="right"))
        off = int(flat - (bounds[li - 1] if li else 0))
        p = params[li][1]
        orig = p.flat[off]
        p.flat[off] = orig + epsilon
        lp, dec_p = _loss_and_decisions(net64, x, labels)
        p.flat[off] = orig - epsilon
        lm, dec_m = _loss_and_decisions(net64, x, labels)
        p.flat[off] = orig
        if any(not np.array_equal(a, b) for a, b in zip(dec_p, dec_m)):
            continue
        accepted += 1
        analytic = float(analytic_grads[li].flat[off])
        numeric = (lp - lm) / (2.0 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


def save_checkpoint(net: UNet, path) -> None:
    """MPSEG1 checkpoint: magic, JSON config+manifest, raw <f4 arrays in layer order."""
    arrays = []
    manifest = []
    offset = 0
    for name, p, _ in net.parameters():
        a = np.ascontiguousarray(p, dtype="<f4")
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        arrays.append(a)
        offset += a.nbytes
    header = json.dumps({"config": asdict(net.config), "manifest": manifest}).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> UNet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 4
    try:
        meta = json.loads(raw[start : start + hlen].decode())
        config = UNetConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"bad checkpoint header in {path}: {e}") from e
    net = build_unet(config)
    data_start = start + hlen
    weights = []
    for entry, (name, p, _) in zip(meta["manifest"], net.parameters()):
        if entry["name"] != name or tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"checkpoint manifest mismatch at {entry['name']}")
        begin = data_start + entry["offset"]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = begin + 4 * n
        if end > len(raw):
            raise CheckpointError(f"checkpoint truncated at {entry['name']}")
        weights.append(np.frombuffer(raw, dtype="<f4", count=n, offset=begin).reshape(entry["shape"]))
    net.set_weights(weights)
    return net
