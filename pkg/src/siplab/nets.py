"""Network builders over the tape primitives.

A :class:`Network` owns one flat float64 parameter vector ``theta``.  Every
named parameter (kernel, bias, batch-norm scale/shift) is a reshaped view
into it, so optimizers update ``theta`` in place and the layers see the
change.  Batch-norm running statistics live in ``buffers`` and are not
counted as parameters.

U-net layout (verified against both reference parameter counts)::

    inc     double conv  in -> F -> F
    down_i  maxpool2, double conv F -> F            (levels - 1 times)
    up_i    bilinear x2, concat skip, double conv 2F -> F -> F   (levels - 1 times)
    outc    1x1 conv F -> out

where "double conv" is two (3x3 conv with bias -> batch norm -> relu)
blocks.  With F=16 this gives 37,697 parameters for 4 levels / 1 channel
and 49,570 for 5 levels / 2 channels.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import io as sio
from . import tensor as T
from .tensor import Tensor, as_tensor

WAVEPACKET_T0_LOW = 25.6
WAVEPACKET_T0_HIGH = 128.0
WAVEPACKET_LENGTH = 256


@dataclass
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    fan_out: int
    kind: str  # "weight", "bias", "bn_scale", "bn_shift"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Network:
    """Layer description plus flat parameter store.

    ``forward_fn(net, x, params, training)`` evaluates the architecture given
    a name -> Tensor mapping.  Use :meth:`forward` for values and
    :meth:`forward_with_leaves` when gradients w.r.t. ``theta`` are needed.
    """

    name: str
    layers: list[dict]
    specs: list[ParamSpec]
    forward_fn: Callable
    check_input: Callable
    theta: np.ndarray = field(default=None)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    mode: str = "train"

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.param_count)
        self._offsets = {}
        off = 0
        for s in self.specs:
            self._offsets[s.name] = (off, s.size)
            off += s.size

    @property
    def param_count(self) -> int:
        return sum(s.size for s in self.specs)

    def view(self, name: str) -> np.ndarray:
        off, n = self._offsets[name]
        spec = next(s for s in self.specs if s.name == name)
        return self.theta[off:off + n].reshape(spec.shape)

    def init(self, seed: int, scheme: str = "kaiming") -> "Network":
        """Fill ``theta``: weights uniform, biases and shifts 0 (unless noted), scales 1.

        ``kaiming`` uses the ReLU gain, bound ``sqrt(6 / fan_in)``; ``fan-in`` is
        Kaiming-uniform with negative slope sqrt(5), bound ``1 / sqrt(fan_in)``,
        and draws biases from the same range; ``xavier`` uses ``sqrt(6 / (fan_in + fan_out))``.
        """
        if scheme not in ("kaiming", "fan-in", "xavier", "zeros"):
            raise ValueError(f"unknown init scheme {scheme!r}")
        rng = np.random.default_rng(seed)
        for s in self.specs:
            v = self.view(s.name)
            if scheme == "fan-in" and s.kind in ("weight", "bias"):
                bound = 1.0 / np.sqrt(s.fan_in)
                v[...] = rng.uniform(-bound, bound, size=s.shape)
            elif s.kind == "weight":
                if scheme == "kaiming":
                    bound = np.sqrt(6.0 / s.fan_in)
                elif scheme == "xavier":
                    bound = np.sqrt(6.0 / (s.fan_in + s.fan_out))
                else:
                    bound = 0.0
                v[...] = rng.uniform(-bound, bound, size=s.shape)
            elif s.kind == "bn_scale":
                v[...] = 1.0
            else:
                v[...] = 0.0
        for k in self.buffers:
            self.buffers[k][...] = 1.0 if k.endswith(".var") else 0.0
        return self

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def _params(self, track: bool) -> dict[str, Tensor]:
        return {s.name: Tensor(self.view(s.name), requires_grad=track) for s in self.specs}

    def forward(self, x, mode: str | None = None) -> Tensor:
        """Evaluate without tracking parameter gradients."""
        return self._run(x, mode, self._params(False))

    def forward_with_leaves(self, x, mode: str | None = None) -> tuple[Tensor, list[Tensor]]:
        """Evaluate with one gradient-tracking leaf per named parameter."""
        params = self._params(True)
        out = self._run(x, mode, params)
        return out, [params[s.name] for s in self.specs]

    def _run(self, x, mode, params) -> Tensor:
        mode = mode or self.mode
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = as_tensor(x)
        self.check_input(x.shape)
        return self.forward_fn(self, x, params, mode == "train")

    def flatten(self, grads: list[np.ndarray]) -> np.ndarray:
        """Concatenate per-leaf gradients in ``theta`` order."""
        return np.concatenate([np.asarray(g).reshape(-1) for g in grads])

    def save(self, path) -> None:
        arrays = {f"param/{s.name}": self.view(s.name) for s in self.specs}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        sio.save_arrays(path, arrays, {"network": self.name, "param_count": self.param_count})

    def load(self, path) -> "Network":
        arrays, meta = sio.load_arrays(path)
        if meta.get("network") != self.name:
            raise ValueError(f"checkpoint holds {meta.get('network')!r}, expected {self.name!r}")
        for s in self.specs:
            a = arrays[f"param/{s.name}"]
            if a.shape != s.shape:
                raise ValueError(f"checkpoint shape {a.shape} for {s.name}, expected {s.shape}")
            self.view(s.name)[...] = a
        for k in self.buffers:
            self.buffers[k][...] = arrays[f"buffer/{k}"]
        return self


class _Builder:
    def __init__(self):
        self.specs: list[ParamSpec] = []
        self.layers: list[dict] = []
        self.buffers: dict[str, np.ndarray] = {}

    def dense(self, name, n_in, n_out):
        self.specs.append(ParamSpec(f"{name}.w", (n_in, n_out), n_in, n_out, "weight"))
        self.specs.append(ParamSpec(f"{name}.b", (n_out,), n_in, n_out, "bias"))
        self.layers.append({"kind": "dense", "name": name, "in": n_in, "out": n_out})

    def conv(self, name, c_in, c_out, k, dims=2):
        shape = (c_out, c_in) + (k,) * dims
        fan_in, fan_out = c_in * k ** dims, c_out * k ** dims
        self.specs.append(ParamSpec(f"{name}.w", shape, fan_in, fan_out, "weight"))
        self.specs.append(ParamSpec(f"{name}.b", (c_out,), fan_in, fan_out, "bias"))
        self.layers.append({"kind": f"conv{dims}d", "name": name, "in": c_in, "out": c_out, "k": k})

    def bn(self, name, c):
        self.specs.append(ParamSpec(f"{name}.gamma", (c,), c, c, "bn_scale"))
        self.specs.append(ParamSpec(f"{name}.beta", (c,), c, c, "bn_shift"))
        self.buffers[f"{name}.mean"] = np.zeros(c)
        self.buffers[f"{name}.var"] = np.ones(c)
        self.layers.append({"kind": "batchnorm", "name": name, "channels": c})

    def double_conv(self, name, c_in, c_mid, c_out):
        self.conv(f"{name}.conv1", c_in, c_mid, 3)
        self.bn(f"{name}.bn1", c_mid)
        self.conv(f"{name}.conv2", c_mid, c_out, 3)
        self.bn(f"{name}.bn2", c_out)


_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "tanh": T.tanh}


def build_mlp(layer_sizes, activation: str = "relu", head: Callable | None = None, seed: int = 0) -> Network:
    """Fully connected net; hidden layers use ``activation``, the output is linear unless ``head`` is given."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"layer_sizes needs at least input and output sizes, got {sizes}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    act = _ACTIVATIONS[activation]
    b = _Builder()
    for i, (a, c) in enumerate(zip(sizes[:-1], sizes[1:])):
        b.dense(f"fc{i}", a, c)
    n_layers = len(sizes) - 1

    def forward(net, x, p, training):
        h = x
        for i in range(n_layers):
            h = h @ p[f"fc{i}.w"] + p[f"fc{i}.b"]
            if i < n_layers - 1:
                h = act(h)
        return head(h) if head is not None else h

    def check(shape):
        if len(shape) != 2 or shape[1] != sizes[0]:
            raise ValueError(f"mlp expects input of shape (batch, {sizes[0]}), got {shape}")

    net = Network(f"mlp{sizes}", b.layers, b.specs, forward, check, buffers=b.buffers)
    return net.init(seed, "fan-in" if activation == "relu" else "xavier")


def _double_conv_fwd(h, p, bufs, name, training):
    for j in (1, 2):
        h = F.conv2d(h, p[f"{name}.conv{j}.w"], p[f"{name}.conv{j}.b"])
        bn = f"{name}.bn{j}"
        h = F.batch_norm(h, p[f"{bn}.gamma"], p[f"{bn}.beta"], bufs[f"{bn}.mean"], bufs[f"{bn}.var"], training)
        h = T.relu(h)
    return h


def build_unet(levels: int = 4, features: int = 16, in_channels: int = 1, out_channels: int = 1,
               seed: int = 0) -> Network:
    """U-net with ``levels`` resolutions (``levels - 1`` pooling steps) and concatenating skips."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    f = features
    b = _Builder()
    b.double_conv("inc", in_channels, f, f)
    for i in range(levels - 1):
        b.layers.append({"kind": "maxpool2", "name": f"down{i}.pool"})
        b.double_conv(f"down{i}", f, f, f)
    for i in range(levels - 1):
        b.layers.append({"kind": "upsample_bilinear2", "name": f"up{i}.upsample"})
        b.double_conv(f"up{i}", 2 * f, f, f)
    b.conv("outc", f, out_channels, 1)
    factor = 2 ** (levels - 1)

    def forward(net, x, p, training):
        bufs = net.buffers
        h = _double_conv_fwd(x, p, bufs, "inc", training)
        skips = [h]
        for i in range(levels - 1):
            h = _double_conv_fwd(F.maxpool2(h), p, bufs, f"down{i}", training)
            skips.append(h)
        skips.pop()
        for i in range(levels - 1):
            h = T.concat([skips.pop(), F.upsample_bilinear2(h)], axis=1)
            h = _double_conv_fwd(h, p, bufs, f"up{i}", training)
        return F.conv2d(h, p["outc.w"], p["outc.b"])

    def check(shape):
        if len(shape) != 4 or shape[1] != in_channels:
            raise ValueError(f"unet expects (batch, {in_channels}, h, w), got {shape}")
        if shape[2] % factor or shape[3] % factor:
            raise ValueError(f"unet with {levels} levels needs spatial extents divisible by {factor}, "
                             f"got {shape[2]}x{shape[3]}")

    net = Network(f"unet{levels}x{f}:{in_channels}->{out_channels}", b.layers, b.specs, forward, check,
                  buffers=b.buffers)
    return net.init(seed, "kaiming")


def scaled_sigmoid(h: Tensor, low: float = WAVEPACKET_T0_LOW, high: float = WAVEPACKET_T0_HIGH) -> Tensor:
    """Map to ``[low, high)``; the clamp keeps a saturated sigmoid off the open end."""
    return T.minimum(low + (high - low) * T.sigmoid(h), np.nextafter(high, low))


def build_wavepacket_net(seed: int = 0) -> Network:
    """1-D conv localizer: five (pool, conv, conv) blocks, dense 64 -> 32 -> 1, scaled sigmoid head."""
    b = _Builder()
    c_in = 1
    for i in range(5):
        b.layers.append({"kind": "maxpool1d", "name": f"block{i}.pool"})
        b.conv(f"block{i}.conv1", c_in, 16, 3, dims=1)
        b.conv(f"block{i}.conv2", 16, 16, 3, dims=1)
        c_in = 16
    flat = 16 * WAVEPACKET_LENGTH // 2 ** 5
    b.dense("fc0", flat, 64)
    b.dense("fc1", 64, 32)
    b.dense("fc2", 32, 1)

    def forward(net, x, p, training):
        h = x if x.ndim == 3 else T.reshape(x, (x.shape[0], 1, x.shape[1]))
        for i in range(5):
            h = F.maxpool1d(h)
            h = T.relu(F.conv1d(h, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"]))
            h = T.relu(F.conv1d(h, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"]))
        h = T.reshape(h, (h.shape[0], flat))
        h = T.relu(h @ p["fc0.w"] + p["fc0.b"])
        h = T.relu(h @ p["fc1.w"] + p["fc1.b"])
        return scaled_sigmoid(h @ p["fc2.w"] + p["fc2.b"])

    def check(shape):
        ok = (len(shape) == 2 and shape[1] == WAVEPACKET_LENGTH) or (
            len(shape) == 3 and shape[1] == 1 and shape[2] == WAVEPACKET_LENGTH)
        if not ok:
            raise ValueError(f"wave-packet net expects (batch, {WAVEPACKET_LENGTH}) or "
                             f"(batch, 1, {WAVEPACKET_LENGTH}), got {shape}")

    net = Network("wavepacket", b.layers, b.specs, forward, check, buffers=b.buffers)
    return net.init(seed, "fan-in")
