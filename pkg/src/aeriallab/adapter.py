"""Bottleneck adapters for parameter-efficient fine-tuning.

Two flavours run in parallel with a block's sublayers: a plain
down-GELU-up adapter beside the attention layer, and a twin with an extra
depthwise convolution over the token grid (at bottleneck width) beside the
MLP.  Up-projections start at exactly zero, so attaching fresh adapters
provably leaves the network function unchanged; during fine-tuning the
backbone is frozen and only adapter entries receive optimizer updates.
"""

from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck is channels/bottleneck_factor unless a fixed
    bottleneck_width overrides it."""

    bottleneck_factor: int = 16
    bottleneck_width: int = None
    conv_kernel: int = 7
    placements: tuple = ("msa", "ffn")

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))
        if self.bottleneck_width is None and self.bottleneck_factor < 1:
            raise ConfigError(f"bottleneck_factor must be >= 1, got {self.bottleneck_factor}")
        if self.bottleneck_width is not None and self.bottleneck_width < 1:
            raise ConfigError(f"bottleneck_width must be >= 1, got {self.bottleneck_width}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        unknown = set(self.placements) - {"msa", "ffn"}
        if unknown:
            raise ConfigError(f"unknown adapter placements: {sorted(unknown)}")

    def width(self, channels):
        if self.bottleneck_width is not None:
            return self.bottleneck_width
        if channels % self.bottleneck_factor != 0:
            raise ConfigError(
                f"{channels} channels not divisible by bottleneck factor {self.bottleneck_factor}"
            )
        return channels // self.bottleneck_factor


def adapter_param_shapes(prefix, channels, acfg: AdapterConfig):
    """(name, shape) entries for one block's adapters at ``channels``."""
    w = acfg.width(channels)
    if "msa" in acfg.placements:
        yield f"{prefix}.msa.down.weight", (channels, w)
        yield f"{prefix}.msa.down.bias", (w,)
        yield f"{prefix}.msa.up.weight", (w, channels)
        yield f"{prefix}.msa.up.bias", (channels,)
    if "ffn" in acfg.placements:
        yield f"{prefix}.ffn.down.weight", (channels, w)
        yield f"{prefix}.ffn.down.bias", (w,)
        yield f"{prefix}.ffn.conv.kernels", (w, acfg.conv_kernel, acfg.conv_kernel)
        yield f"{prefix}.ffn.up.weight", (w, channels)
        yield f"{prefix}.ffn.up.bias", (channels,)


def adapter_msa(x, store, prefix):
    """Up(GELU(Down(x))) beside the attention sublayer."""
    h = ad.linear(x, store[f"{prefix}.down.weight"], store[f"{prefix}.down.bias"])
    h = ad.gelu(h)
    return ad.linear(h, store[f"{prefix}.up.weight"], store[f"{prefix}.up.bias"])


def adapter_ffn(x, grid, store, prefix, acfg: AdapterConfig):
    """Up(GELU(Conv(GELU(Down(x))))) beside the MLP sublayer; Conv is a
    depthwise kernel over the token grid at bottleneck width."""
    b, t, _ = x.shape
    h = ad.linear(x, store[f"{prefix}.down.weight"], store[f"{prefix}.down.bias"])
    h = ad.gelu(h)
    width = h.shape[-1]
    g = ad.transpose(ad.reshape(h, (b, grid, grid, width)), (0, 3, 1, 2))
    g = ad.depthwise_conv2d(g, store[f"{prefix}.conv.kernels"], (acfg.conv_kernel - 1) // 2)
    h = ad.reshape(ad.transpose(g, (0, 2, 3, 1)), (b, t, width))
    h = ad.gelu(h)
    return ad.linear(h, store[f"{prefix}.up.weight"], store[f"{prefix}.up.bias"])


def freeze_backbone(store):
    """Mark only adapter entries trainable; everything else is frozen.

    Optimizer steps skip frozen tensors entirely, so their bytes never
    change.  Raises if the store carries no adapters to train.
    """
    adapter_names = [n for n in store if n.startswith("adapter.")]
    if not adapter_names:
        raise ContractError("freeze_backbone: no adapter parameters attached")
    for name, tensor in store.items():
        tensor.requires_grad = name.startswith("adapter.")
    return store


@dataclass(frozen=True)
class ParamReport:
    """Exact parameter accounting for a (backbone, adapter) pairing."""

    total: int
    trainable: int
    by_group: dict

    @property
    def ratio(self):
        return self.trainable / self.total if self.total else 0.0

    def as_dict(self):
        return {
            "total": self.total,
            "trainable": self.trainable,
            "ratio": self.ratio,
            "by_group": dict(self.by_group),
        }


def count_params(cfg, acfg: AdapterConfig = None):
    """Enumerate every store entry for the config pair; under adapter
    fine-tuning only the adapter entries are trainable."""
    from .model import param_shapes  # local import: model wires adapters in

    total = 0
    trainable = 0
    by_group = {"backbone": 0, "adapter": 0}
    for name, shape in param_shapes(cfg, acfg):
        n = 1
        for d in shape:
            n *= d
        total += n
        if name.startswith("adapter."):
            trainable += n
            by_group["adapter"] += n
        else:
            by_group["backbone"] += n
    return ParamReport(total=total, trainable=trainable, by_group=by_group)
