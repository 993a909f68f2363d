"""Hierarchical windowed-attention encoder with per-channel convolution
ahead of every attention layer.

The encoder follows the four-stage shifted-window design: non-overlapping
patch embedding, stages of paired (plain, shifted) window-attention blocks,
and 2x2 patch merging between stages.  Ahead of each attention layer the
normalized tokens pass through a depthwise convolution over the token grid
(split into contiguous channel groups, concatenated back) with a residual
around the convolution, which sharpens small-object detail before the
attention map is formed.  Blocks optionally carry bottleneck adapters in
parallel with the attention and MLP sublayers.

All learnable state lives in a flat dict of named Tensors so freezing,
checkpointing, and counting never need to walk object graphs.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import adapter as adapter_mod
from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import ConfigError, ShapeError

LN_EPS = 1e-6
MLP_RATIO = 4
MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Backbone dimensions; stage s runs at embed_dim * 2**s channels."""

    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (2, 4, 8, 8)
    window: int = 4
    fe_kernel: int = 7
    channel_groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError("depths and heads must be equal-length, non-empty")
        if self.fe_kernel % 2 == 0:
            raise ConfigError(f"fe_kernel must be odd, got {self.fe_kernel}")
        for s in range(self.num_stages):
            c = self.stage_dim(s)
            if c % self.heads[s] != 0:
                raise ConfigError(f"stage {s}: {c} channels not divisible by {self.heads[s]} heads")
            if c % self.channel_groups != 0:
                raise ConfigError(
                    f"stage {s}: {c} channels not divisible by {self.channel_groups} channel groups"
                )
            g = self.stage_grid(s)
            if g < 1:
                raise ConfigError(f"stage {s}: token grid vanished")
            if g % self.stage_window(s) != 0:
                raise ConfigError(f"stage {s}: grid {g} not divisible by window {self.stage_window(s)}")

    @property
    def num_stages(self):
        return len(self.depths)

    def stage_dim(self, s):
        return self.embed_dim * (2 ** s)

    def stage_grid(self, s):
        return (self.image_size // self.patch_size) // (2 ** s)

    def stage_window(self, s):
        # a grid no larger than the window is attended as a single window
        return min(self.window, self.stage_grid(s))

    def stage_shift(self, s):
        w = self.stage_window(s)
        return w // 2 if self.stage_grid(s) > w else 0


# toy scale used throughout the test and demo runs
TOY_CONFIG = ModelConfig()

# constructible for dry parameter counting only, never trained:
# base-scale config (224 px, embed 128, depths [2,2,18,2], heads [4,8,16,32],
# window 7)
BASE_SCALE_CONFIG = ModelConfig(
    image_size=224,
    patch_size=4,
    embed_dim=128,
    depths=(2, 2, 18, 2),
    heads=(4, 8, 16, 32),
    window=7,
)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig, adapter_cfg=None):
    """Yield (name, shape) for every backbone (and adapter) parameter."""
    p, c0 = cfg.patch_size, cfg.embed_dim
    yield "embed.weight", (3 * p * p, c0)
    yield "embed.bias", (c0,)
    for s in range(cfg.num_stages):
        c = cfg.stage_dim(s)
        w = cfg.stage_window(s)
        for b in range(cfg.depths[s]):
            pre = f"stage{s}.block{b}"
            yield f"{pre}.ln1.gamma", (c,)
            yield f"{pre}.ln1.beta", (c,)
            yield f"{pre}.fe.kernels", (c, cfg.fe_kernel, cfg.fe_kernel)
            yield f"{pre}.attn.qkv.weight", (c, 3 * c)
            yield f"{pre}.attn.qkv.bias", (3 * c,)
            yield f"{pre}.attn.bias_table", ((2 * w - 1) ** 2, cfg.heads[s])
            yield f"{pre}.attn.proj.weight", (c, c)
            yield f"{pre}.attn.proj.bias", (c,)
            yield f"{pre}.ln2.gamma", (c,)
            yield f"{pre}.ln2.beta", (c,)
            yield f"{pre}.mlp.fc1.weight", (c, MLP_RATIO * c)
            yield f"{pre}.mlp.fc1.bias", (MLP_RATIO * c,)
            yield f"{pre}.mlp.fc2.weight", (MLP_RATIO * c, c)
            yield f"{pre}.mlp.fc2.bias", (c,)
            if adapter_cfg is not None:
                yield from adapter_mod.adapter_param_shapes(
                    f"adapter.stage{s}.block{b}", c, adapter_cfg
                )
        if s < cfg.num_stages - 1:
            yield f"merge{s}.weight", (4 * c, 2 * c)
            yield f"merge{s}.bias", (2 * c,)


def init_array(name, shape, rng):
    if name.endswith((".bias", ".beta", ".bias_table")) or ".up." in name:
        return np.zeros(shape)
    if name.endswith((".gamma",)):
        return np.ones(shape)
    if name.endswith(".fe.kernels"):
        # zero kernels make the enhancement start as an exact identity
        return np.zeros(shape)
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape, random_state=rng)


def init_params(cfg: ModelConfig, rng, adapter_cfg=None):
    """Fresh parameter store: truncated-normal weights (std 0.02), zero
    biases and bias tables, ones for layernorm gains, zero conv kernels,
    zero adapter up-projections."""
    store = {}
    for name, shape in param_shapes(cfg, adapter_cfg):
        store[name] = ad.param(init_array(name, shape, rng))
    return store


def count_store(store, trainable_only=False):
    return sum(t.size for t in store.values() if t.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# window bookkeeping (pure index math, shared with tests)
# ---------------------------------------------------------------------------

def partition_index_grid(grid, window):
    """Window partition of a [grid, grid] index array -> [nW, window*window]."""
    idx = np.arange(grid * grid).reshape(grid, grid)
    t = idx.reshape(grid // window, window, grid // window, window)
    return t.transpose(0, 2, 1, 3).reshape(-1, window * window)


def shifted_partition(grid, window, shift):
    """Partition after a cyclic shift by ``shift`` on both axes."""
    idx = np.arange(grid * grid).reshape(grid, grid)
    rolled = np.roll(np.roll(idx, -shift, axis=0), -shift, axis=1)
    t = rolled.reshape(grid // window, window, grid // window, window)
    return t.transpose(0, 2, 1, 3).reshape(-1, window * window)


def relative_position_index(window):
    """[w*w, w*w] lookup into the (2w-1)^2-row bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def shift_attention_mask(grid, window, shift):
    """Additive mask [nW, w*w, w*w]: large negative where a shifted window
    straddles tokens that were not neighbours before the cyclic shift."""
    labels = np.zeros((grid, grid), dtype=np.int64)
    cuts = (slice(0, grid - window), slice(grid - window, grid - shift), slice(grid - shift, grid))
    n = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = n
            n += 1
    t = labels.reshape(grid // window, window, grid // window, window)
    win_labels = t.transpose(0, 2, 1, 3).reshape(-1, window * window)
    differs = win_labels[:, :, None] != win_labels[:, None, :]
    return np.where(differs, MASK_VALUE, 0.0)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def patch_embed(store, img, cfg):
    """[B, 3, H, W] image -> [B, tokens, embed_dim] via non-overlapping
    patch flattening and a linear projection."""
    b, ch, h, w = img.shape
    p = cfg.patch_size
    if ch != 3 or h != cfg.image_size or w != cfg.image_size:
        raise ConfigError(f"image shape {img.shape} does not match config {cfg.image_size}")
    ht, wt = h // p, w // p
    x = ad.reshape(img, (b, 3, ht, p, wt, p))
    x = ad.transpose(x, (0, 2, 4, 3, 5, 1))
    x = ad.reshape(x, (b, ht * wt, p * p * 3))
    return ad.linear(x, store["embed.weight"], store["embed.bias"])


def _window_partition(z, grid, window):
    b, t, c = z.shape
    n = grid // window
    x = ad.reshape(z, (b, n, window, n, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * n * n, window * window, c))


def _window_merge(wins, grid, window, batch):
    n = grid // window
    c = wins.shape[-1]
    x = ad.reshape(wins, (batch, n, n, window, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (batch, grid * grid, c))


def window_attention(z, grid, store, prefix, heads, window, shifted, shift, return_weights=False):
    """Multi-head attention inside (optionally cyclically shifted) windows.

    Implements softmax(q k^T / sqrt(d) + B) v per window and head, where B
    is the learned relative-position bias table gathered per displacement.
    A shifted pass rolls the grid by ``shift``, masks attention across the
    seams, and rolls back.
    """
    if grid % window != 0:
        raise ConfigError(f"grid {grid} not divisible by window {window}")
    b, t, c = z.shape
    if t != grid * grid:
        raise ShapeError(f"{t} tokens do not fill a {grid}x{grid} grid")
    dh = c // heads
    ww = window * window
    use_shift = shifted and shift > 0

    x = ad.reshape(z, (b, grid, grid, c))
    if use_shift:
        x = ad.roll_axis(ad.roll_axis(x, -shift, 1), -shift, 2)
    x = ad.reshape(x, (b, t, c))
    wins = _window_partition(x, grid, window)
    nw = wins.shape[0] // b

    qkv = ad.linear(wins, store[f"{prefix}.qkv.weight"], store[f"{prefix}.qkv.bias"])
    parts = []
    for i in range(3):
        piece = ad.slice_axis(qkv, 2, i * c, (i + 1) * c)
        piece = ad.reshape(piece, (b * nw, ww, heads, dh))
        parts.append(ad.transpose(piece, (0, 2, 1, 3)))
    q, k, v = parts

    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    bias = ad.take_rows(store[f"{prefix}.bias_table"], relative_position_index(window).reshape(-1))
    bias = ad.transpose(ad.reshape(bias, (ww, ww, heads)), (2, 0, 1))
    logits = ad.add(logits, bias)
    if use_shift:
        mask = shift_attention_mask(grid, window, shift)
        logits = ad.reshape(logits, (b, nw, heads, ww, ww))
        logits = ad.add(logits, constant(mask[None, :, None, :, :]))
        logits = ad.reshape(logits, (b * nw, heads, ww, ww))

    attn = ad.softmax_lastdim(logits)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b * nw, ww, c))
    out = ad.linear(out, store[f"{prefix}.proj.weight"], store[f"{prefix}.proj.bias"])
    out = _window_merge(out, grid, window, b)
    if use_shift:
        out = ad.reshape(out, (b, grid, grid, c))
        out = ad.roll_axis(ad.roll_axis(out, shift, 1), shift, 2)
        out = ad.reshape(out, (b, t, c))
    if return_weights:
        return out, attn.data.copy()
    return out


def fe_enhance(z, grid, kernels, channel_groups):
    """Depthwise 2-D convolution over the token grid, applied per contiguous
    channel group and concatenated back, with a residual around the
    convolution (zero kernels therefore act as the identity)."""
    b, t, c = z.shape
    if t != grid * grid:
        raise ShapeError(f"{t} tokens do not fill a {grid}x{grid} grid")
    k = kernels.shape[1]
    pad = (k - 1) // 2
    x = ad.transpose(ad.reshape(z, (b, grid, grid, c)), (0, 3, 1, 2))
    per = c // channel_groups
    convs = []
    for g in range(channel_groups):
        xg = ad.slice_axis(x, 1, g * per, (g + 1) * per)
        kg = ad.slice_axis(kernels, 0, g * per, (g + 1) * per)
        convs.append(ad.depthwise_conv2d(xg, kg, pad))
    y = ad.concat(convs, axis=1)
    y = ad.reshape(ad.transpose(y, (0, 2, 3, 1)), (b, t, c))
    return ad.add(z, y)


def encoder_block(z, grid, store, prefix, cfg, stage, shifted, adapter_cfg=None):
    """One residual block: conv-enhanced window attention, then the MLP.

    z -> z + Attn(FE(LN(z))) [+ attention adapter on LN(z)]
      -> + MLP(LN(.))        [+ conv adapter on LN(.)]
    """
    heads = cfg.heads[stage]
    window = cfg.stage_window(stage)
    shift = cfg.stage_shift(stage)
    adapter_prefix = prefix.replace("stage", "adapter.stage", 1) if adapter_cfg else None

    ln1 = ad.layernorm(z, store[f"{prefix}.ln1.gamma"], store[f"{prefix}.ln1.beta"], LN_EPS)
    branch = fe_enhance(ln1, grid, store[f"{prefix}.fe.kernels"], cfg.channel_groups)
    branch = window_attention(branch, grid, store, f"{prefix}.attn", heads, window, shifted, shift)
    if adapter_cfg is not None and "msa" in adapter_cfg.placements:
        branch = ad.add(branch, adapter_mod.adapter_msa(ln1, store, f"{adapter_prefix}.msa"))
    z = ad.add(z, branch)

    ln2 = ad.layernorm(z, store[f"{prefix}.ln2.gamma"], store[f"{prefix}.ln2.beta"], LN_EPS)
    mlp = ad.linear(ln2, store[f"{prefix}.mlp.fc1.weight"], store[f"{prefix}.mlp.fc1.bias"])
    mlp = ad.linear(ad.gelu(mlp), store[f"{prefix}.mlp.fc2.weight"], store[f"{prefix}.mlp.fc2.bias"])
    if adapter_cfg is not None and "ffn" in adapter_cfg.placements:
        mlp = ad.add(mlp, adapter_mod.adapter_ffn(ln2, grid, store, f"{adapter_prefix}.ffn", adapter_cfg))
    return ad.add(z, mlp)


def patch_merge(z, grid, store, prefix):
    """Concatenate 2x2 token neighbourhoods (4C) and project to 2C."""
    if grid % 2 != 0:
        raise ConfigError(f"patch merge needs an even grid, got {grid}")
    b, t, c = z.shape
    x = ad.reshape(z, (b, grid // 2, 2, grid // 2, 2, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, (grid // 2) ** 2, 4 * c))
    return ad.linear(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"])


def forward(store, img, cfg: ModelConfig, adapter_cfg=None, token_mask=None):
    """Run the encoder; returns (per-stage token tensors, pooled feature).

    ``img`` is a Tensor or array [B, 3, H, W].  ``token_mask`` is an
    optional [B, tokens, 1] 0/1 array; masked tokens are replaced by the
    learned ``mask_token`` entry of the store right after embedding.
    """
    if not isinstance(img, Tensor):
        img = constant(img)
    z = patch_embed(store, img, cfg)
    if token_mask is not None:
        m = constant(np.asarray(token_mask, dtype=np.float64))
        filler = ad.reshape(store["mask_token"], (1, 1, cfg.embed_dim))
        z = ad.add(ad.mul(z, constant(1.0) - m), ad.mul(filler, m))
    stage_feats = []
    for s in range(cfg.num_stages):
        grid = cfg.stage_grid(s)
        for bidx in range(cfg.depths[s]):
            z = encoder_block(
                z, grid, store, f"stage{s}.block{bidx}", cfg, s,
                shifted=bool(bidx % 2), adapter_cfg=adapter_cfg,
            )
        stage_feats.append(z)
        if s < cfg.num_stages - 1:
            z = patch_merge(z, grid, store, f"merge{s}")
    pooled = ad.reduce_mean(stage_feats[-1], axis=1)
    return stage_feats, pooled
