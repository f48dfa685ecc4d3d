"""Dense-UNet segmentation backbone with seeded spatial dropout.

The same architecture is used for the teacher and the student network:
``num_encoder_blocks`` dense blocks with 2x2 max-pool transitions, one
bottleneck dense block, and a mirrored decoder (nearest-neighbor upsampling +
3x3 conv) with skip connections from each encoder block. Each dense block
holds ``units_per_block`` conv units (3x3 conv, BN, ReLU) wired densely: unit
k sees the block input concatenated with the outputs of units 1..k-1, and the
block emits the concatenation of all unit outputs, i.e.
``units_per_block * filters_per_unit`` feature maps.

Spatial dropout (whole feature maps dropped, survivors rescaled by
1/(1-rate)) sits before every convolution except the stem conv that reads the
raw image; dropping the entire (single-channel) input would zero all
information, so the stem is exempt. Dropout is controlled explicitly per call
rather than by ``train()``/``eval()`` so that stochastic inference passes are
reproducible: each forward owns a seed and masks are drawn from a private
``torch.Generator``. BatchNorm always uses running statistics outside
training steps, including stochastic passes.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError
from .seeding import derive_seed


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters of the Dense-UNet backbone."""

    num_classes: int
    units_per_block: int = 4
    filters_per_unit: int = 8
    num_encoder_blocks: int = 3
    dropout_rate: float = 0.2
    input_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("units_per_block", "filters_per_unit", "num_encoder_blocks", "input_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def block_channels(self) -> int:
        """Feature maps produced by every dense block."""
        return self.units_per_block * self.filters_per_unit

    @property
    def spatial_divisor(self) -> int:
        """Input height/width must be divisible by this."""
        return 2**self.num_encoder_blocks


class _DropoutState:
    """Shared switch + per-sample generators for all spatial dropout layers."""

    def __init__(self):
        self.active = False
        self.generators: list[torch.Generator] = []


class SpatialDropout(nn.Module):
    """Channel dropout with explicit seeding.

    When active, sample n draws a Bernoulli keep mask over channels from
    ``state.generators[n]``; kept channels are scaled by 1/(1-rate). Layers
    consume draws from the per-sample generator in module order, so the mask
    pattern is a pure function of the sample's seed.
    """

    def __init__(self, rate: float, state: _DropoutState):
        super().__init__()
        self.rate = float(rate)
        self.state = state

    def forward(self, x):
        if not self.state.active or self.rate == 0.0:
            return x
        n, c = x.shape[0], x.shape[1]
        gens = self.state.generators
        if len(gens) != n:
            raise ShapeError(f"dropout needs {n} per-sample generators, have {len(gens)}")
        keep = torch.empty(n, c, dtype=x.dtype)
        for i, gen in enumerate(gens):
            keep[i] = (torch.rand(c, generator=gen) >= self.rate).to(x.dtype)
        keep = keep.to(x.device) / (1.0 - self.rate)
        return x * keep[:, :, None, None]


class _ConvUnit(nn.Module):
    """(spatial dropout) -> 3x3 conv -> BN -> ReLU."""

    def __init__(self, in_ch, out_ch, rate, state, with_dropout=True):
        super().__init__()
        self.drop = SpatialDropout(rate, state) if with_dropout else None
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        if self.drop is not None:
            x = self.drop(x)
        return torch.relu(self.bn(self.conv(x)))


class _DenseBlock(nn.Module):
    """Densely wired conv units; output is the concat of all unit outputs."""

    def __init__(self, in_ch, units, growth, rate, state, stem=False):
        super().__init__()
        self.units = nn.ModuleList()
        ch = in_ch
        for k in range(units):
            self.units.append(_ConvUnit(ch, growth, rate, state, with_dropout=not (stem and k == 0)))
            ch += growth

    def forward(self, x):
        outputs = []
        cur = x
        for unit in self.units:
            y = unit(cur)
            outputs.append(y)
            cur = torch.cat([cur, y], dim=1)
        return torch.cat(outputs, dim=1)


class _UpTransition(nn.Module):
    """Nearest-neighbor 2x upsample followed by a conv unit."""

    def __init__(self, channels, rate, state):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.unit = _ConvUnit(channels, channels, rate, state)

    def forward(self, x):
        return self.unit(self.up(x))


class DenseUNet(nn.Module):
    """Encoder/decoder dense-block network emitting per-pixel class logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.dropout_state = _DropoutState()
        w = config.block_channels
        rate, state = config.dropout_rate, self.dropout_state

        self.encoder = nn.ModuleList()
        in_ch = config.input_channels
        for b in range(config.num_encoder_blocks):
            self.encoder.append(
                _DenseBlock(in_ch, config.units_per_block, config.filters_per_unit, rate, state, stem=(b == 0))
            )
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DenseBlock(w, config.units_per_block, config.filters_per_unit, rate, state)
        self.up_transitions = nn.ModuleList(
            [_UpTransition(w, rate, state) for _ in range(config.num_encoder_blocks)]
        )
        self.decoder = nn.ModuleList(
            [_DenseBlock(2 * w, config.units_per_block, config.filters_per_unit, rate, state) for _ in range(config.num_encoder_blocks)]
        )
        self.head_drop = SpatialDropout(rate, state)
        self.head = nn.Conv2d(w, config.num_classes, kernel_size=1)

    def forward(self, x):
        """Input (N, in_ch, H, W) -> logits (N, C, H, W)."""
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        # decoder block j consumes the skip from encoder block (n - j + 1)
        for up, block, skip in zip(self.up_transitions, self.decoder, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(self.head_drop(x))


def build_model(config: ModelConfig, init_seed: int = 0) -> DenseUNet:
    """Construct a Dense-UNet with He-normal conv weights drawn from ``init_seed``."""
    model = DenseUNet(config)
    gen = torch.Generator().manual_seed(derive_seed(init_seed, "weight-init"))
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    model.eval()
    return model


def _check_spatial(config: ModelConfig, h: int, w: int):
    d = config.spatial_divisor
    if h % d or w % d:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {d} (2^num_encoder_blocks)")


def image_to_tensor(image: np.ndarray, input_channels: int) -> torch.Tensor:
    """(H, W) or (H, W, ch) float array -> (1, ch, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != input_channels:
        raise ShapeError(f"expected (H, W) or (H, W, {input_channels}) image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def batched_scores(model: DenseUNet, batch: torch.Tensor, dropout_seeds=None) -> torch.Tensor:
    """Run a batch through the net and return (N, H, W, C) softmax scores.

    ``dropout_seeds`` is a per-sample seed list enabling stochastic masks;
    ``None`` runs with dropout off. BN mode (batch vs running statistics)
    follows the module's train/eval state and is the caller's responsibility.
    """
    state = model.dropout_state
    if dropout_seeds is not None:
        if len(dropout_seeds) != batch.shape[0]:
            raise ShapeError("need one dropout seed per batch sample")
        state.active = True
        state.generators = [torch.Generator().manual_seed(int(s)) for s in dropout_seeds]
    try:
        logits = model(batch)
    finally:
        state.active = False
        state.generators = []
    return torch.softmax(logits.permute(0, 2, 3, 1), dim=-1)


def predict_scores(
    model: DenseUNet,
    image: np.ndarray,
    dropout_active: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Segmentation scores for one image, (H, W, C) float32 summing to 1 per pixel.

    Without dropout the output is a deterministic function of the parameters;
    with dropout it is a deterministic function of (parameters, image, seed).
    BatchNorm uses running statistics either way.
    """
    cfg = model.config
    x = image_to_tensor(image, cfg.input_channels)
    _check_spatial(cfg, x.shape[2], x.shape[3])
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            scores = batched_scores(model, x, dropout_seeds=[seed] if dropout_active else None)
    finally:
        model.train(was_training)
    return scores[0].numpy()


def validate_score_map(scores: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Check an (H, W, C) grid is a per-pixel distribution; returns the array."""
    arr = np.asarray(scores)
    if arr.ndim != 3:
        raise ShapeError(f"score map must be (H, W, C), got shape {arr.shape}")
    if arr.min() < -tol or arr.max() > 1 + tol:
        raise ShapeError("score map entries must lie in [0, 1]")
    err = np.abs(arr.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ShapeError(f"score map rows must sum to 1 (max deviation {err:.2e})")
    return arr
