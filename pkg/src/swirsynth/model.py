"""The band-synthesis network: residual feature path plus a 1x1 skip path.

The network maps a (G, R, NIR) patch to a single synthesized SWIR band at
the same spatial size. A 3x3 head convolution (no activation) feeds a
chain of residual blocks (conv-relu-conv, scaled, identity skip, no
output activation); a 3x3 fuse convolution collapses the features to one
band; a parallel 1x1 skip convolution on the raw input carries the
spatial structure. The two paths are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor, add, conv2d, no_grad, relu, scale

__all__ = [
    "ModelConfig",
    "Conv",
    "ResidualBlock",
    "SwirNet",
    "build_model",
    "count_parameters",
    "count_layers",
    "parameter_shapes",
    "forward",
    "predict_patch",
    "MAX_DN",
]

MAX_DN = 1023  # 10-bit radiometry


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``residual_scaling`` damps each block's convolutional branch; 0 is
    permitted as a diagnostic that turns every block into the identity.
    ``normalize`` divides input DN by 1023 and rescales the output, for
    experiments; the default operates in raw DN space.
    """

    num_res_blocks: int
    feature_size: int
    kernel_size: int = 3
    in_bands: int = 3
    out_bands: int = 1
    residual_scaling: float = 0.1
    init_seed: int = 0
    normalize: bool = False

    def validate(self) -> None:
        if self.num_res_blocks < 1:
            raise ValueError("num_res_blocks must be >= 1")
        if self.feature_size < 1:
            raise ValueError("feature_size must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.in_bands < 1 or self.out_bands < 1:
            raise ValueError("band counts must be positive")
        if not 0.0 <= self.residual_scaling <= 1.0:
            raise ValueError("residual_scaling must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "num_res_blocks": self.num_res_blocks,
            "feature_size": self.feature_size,
            "kernel_size": self.kernel_size,
            "in_bands": self.in_bands,
            "out_bands": self.out_bands,
            "residual_scaling": self.residual_scaling,
            "init_seed": self.init_seed,
            "normalize": self.normalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class Conv:
    """A convolution layer: kernel + bias parameters."""

    def __init__(self, kernel: Parameter, bias: Parameter):
        self.kernel = kernel
        self.bias = bias

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.kernel, self.bias)


class ResidualBlock:
    """conv 3x3 -> relu -> conv 3x3, scaled and added to the block input.

    No activation on the block output; the identity path keeps the raw
    dynamic range flowing through the chain.
    """

    def __init__(self, conv1: Conv, conv2: Conv, scaling: float):
        self.conv1 = conv1
        self.conv2 = conv2
        self.scaling = scaling

    def __call__(self, x) -> Tensor:
        branch = self.conv2(relu(self.conv1(x)))
        return add(x, scale(branch, self.scaling))


@dataclass
class SwirNet:
    """The assembled network with its ordered trainable parameters."""

    head: Conv
    blocks: list
    fuse: Conv
    skip: Conv
    config: ModelConfig
    _params: list = field(default_factory=list, repr=False)

    def parameters(self) -> list:
        """Parameters in serialization order: head, blocks, fuse, skip."""
        return list(self._params)


def parameter_shapes(cfg: ModelConfig) -> list:
    """Ordered parameter shapes: head k/b, per block conv1 k/b conv2 k/b,
    fuse k/b, skip k/b. Kernels are (kh, kw, Cin, Cout)."""
    k, c = cfg.kernel_size, cfg.feature_size
    shapes = [(k, k, cfg.in_bands, c), (c,)]
    for _ in range(cfg.num_res_blocks):
        shapes += [(k, k, c, c), (c,), (k, k, c, c), (c,)]
    shapes += [(k, k, c, cfg.out_bands), (cfg.out_bands,)]
    shapes += [(1, 1, cfg.in_bands, cfg.out_bands), (cfg.out_bands,)]
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    """Total trainable scalars for a configuration."""
    cfg.validate()
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg))


def count_layers(cfg: ModelConfig) -> int:
    """Total convolution layers: head + 2 per block + fuse + skip."""
    return 2 * cfg.num_res_blocks + 3


def build_model(cfg: ModelConfig, dtype=np.float32) -> SwirNet:
    """Deterministically initialize a network from ``cfg.init_seed``.

    Kernels use He fan-in scaling (std = sqrt(2 / (kh*kw*Cin))), biases
    start at zero. The draw order equals the serialization order, so the
    same seed always yields bit-identical parameters.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    params = []
    for shape in parameter_shapes(cfg):
        if len(shape) == 4:
            kh, kw, cin, _ = shape
            std = np.sqrt(2.0 / (kh * kw * cin))
            data = (rng.standard_normal(shape) * std).astype(dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params.append(Parameter(data))

    head = Conv(params[0], params[1])
    blocks = []
    for n in range(cfg.num_res_blocks):
        base = 2 + 4 * n
        blocks.append(
            ResidualBlock(
                Conv(params[base], params[base + 1]),
                Conv(params[base + 2], params[base + 3]),
                cfg.residual_scaling,
            )
        )
    base = 2 + 4 * cfg.num_res_blocks
    fuse = Conv(params[base], params[base + 1])
    skip = Conv(params[base + 2], params[base + 3])
    return SwirNet(head, blocks, fuse, skip, cfg, params)


def load_parameters(model: SwirNet, arrays) -> None:
    """Copy ``arrays`` (serialization order) into the model in place."""
    params = model.parameters()
    if len(arrays) != len(params):
        raise ValueError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
    for p, a in zip(params, arrays):
        a = np.asarray(a)
        if a.shape != p.data.shape:
            raise ValueError(f"parameter shape mismatch: {a.shape} vs {p.data.shape}")
        p.data = a.astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)


def forward(model: SwirNet, x) -> Tensor:
    """Run the network on (H, W, 3) or batched (B, H, W, 3) input.

    Output spatial size equals input spatial size; channel count is
    ``out_bands``. The residual blocks update the feature path; the 1x1
    skip path is evaluated on the raw input bands and added at the end.
    """
    cfg = model.config
    if not isinstance(x, Tensor):
        x = Tensor(x)  # integer DN arrays become float32
    nch = x.shape[-1]
    if nch != cfg.in_bands:
        raise ValueError(f"channel mismatch: input has {nch} bands, model expects {cfg.in_bands}")

    src = scale(x, 1.0 / MAX_DN) if cfg.normalize else x
    feats = model.head(src)
    for block in model.blocks:
        feats = block(feats)
    local = model.fuse(feats)
    skip = model.skip(src)
    out = add(skip, local)
    if cfg.normalize:
        out = scale(out, float(MAX_DN))
    return out


def predict_patch(model: SwirNet, patch) -> np.ndarray:
    """Forward a DN patch and quantize: clamp to [0, 1023], round
    half-to-even, returned as uint16 of shape (H, W, out_bands)."""
    with no_grad():
        out = forward(model, np.asarray(patch, dtype=np.float32))
    dn = np.clip(out.data, 0, MAX_DN)
    return np.rint(dn).astype(np.uint16)
