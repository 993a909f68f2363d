"""Pre-training objectives: masked reconstruction and in-batch contrast.

Masking is unit-aligned: the image is tiled into square units of a fixed
pixel size, a rounded fraction of units is hidden, and the loss is the L1
error over masked pixels only, so unmasked pixels contribute exactly
nothing.  The contrastive loss is the symmetric in-batch softmax over
cosine similarities at temperature tau: each original must retrieve its
own transformed view against the rest of the batch, and vice versa.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import constant
from .errors import ConfigError, ContractError


@dataclass
class MaskSpec:
    """Boolean unit grid plus the unit size in pixels."""

    units: np.ndarray
    unit: int
    ratio: float

    @property
    def masked_fraction(self):
        return float(self.units.mean())

    def pixel_mask(self):
        """0/1 float mask at pixel resolution."""
        return np.kron(self.units.astype(np.float64), np.ones((self.unit, self.unit)))

    def token_mask(self, patch_size):
        """0/1 float mask [tokens, 1] at patch resolution.

        The unit size must be a multiple of the patch size so units cover
        whole patches.
        """
        if self.unit % patch_size != 0:
            raise ConfigError(
                f"mask unit {self.unit} is not a multiple of patch size {patch_size}"
            )
        per = self.unit // patch_size
        grid = np.kron(self.units.astype(np.float64), np.ones((per, per)))
        return grid.reshape(-1, 1)


def make_mask(img_size, unit, ratio, rng):
    """Uniformly random unit-aligned mask.

    The number of masked units is round(ratio * total_units), which keeps
    the realized fraction within one unit of the request.
    """
    if img_size % unit != 0:
        raise ConfigError(f"image size {img_size} not divisible by mask unit {unit}")
    if not (0.0 <= ratio < 1.0):
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    per_side = img_size // unit
    total = per_side * per_side
    n_masked = int(round(ratio * total))
    units = np.zeros(total, dtype=bool)
    if n_masked:
        units[rng.choice(total, size=n_masked, replace=False)] = True
    return MaskSpec(units=units.reshape(per_side, per_side), unit=unit, ratio=ratio)


def mim_loss(pred, target, mask: MaskSpec):
    """L1 averaged over masked pixels only.

    ``pred`` and ``target`` are [C, S, S] or [B, C, S, S]; the pixel mask
    broadcasts over batch and channels.  Raises if the mask is empty (the
    average would be undefined).
    """
    pm = mask.pixel_mask()
    if pm.sum() == 0:
        raise ContractError("mim_loss: empty mask leaves the loss undefined")
    target = target if isinstance(target, ad.Tensor) else constant(target)
    if pred.shape != target.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} disagree")
    if pred.shape[-2:] != pm.shape:
        raise ContractError(f"mask {pm.shape} does not cover images of shape {pred.shape}")
    denom = pm.sum() * int(np.prod(pred.shape[:-2]))
    masked_abs = ad.mul(ad.abs_(ad.sub(pred, target)), constant(pm))
    return ad.scale(ad.reduce_sum(masked_abs), 1.0 / denom)


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.2
    projection_dim: int = 32
    weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def _l2_normalize_rows(x):
    sq = ad.reduce_sum(ad.mul(x, x), axis=1, keepdims=True)
    return ad.div(x, ad.sqrt(sq))


def cosine_similarities(feats_a, feats_b):
    """Row-normalized [N, N] similarity matrix (autodiff tensor)."""
    na = _l2_normalize_rows(feats_a)
    nb = _l2_normalize_rows(feats_b)
    return ad.matmul(na, ad.transpose(nb, (1, 0)))


def info_nce(feats_a, feats_b, temperature):
    """Symmetric in-batch contrastive loss.

    Rows are L2-normalized internally; entry (i, i) of the similarity
    matrix is the positive.  The cross-entropy against the diagonal is
    averaged over rows and over both directions.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    n = feats_a.shape[0]
    if n < 2 or feats_b.shape[0] != n:
        raise ContractError(f"need two aligned batches of >= 2 rows, got {feats_a.shape} / {feats_b.shape}")
    logits = ad.scale(cosine_similarities(feats_a, feats_b), 1.0 / temperature)
    eye = constant(np.eye(n))

    def direction(lg):
        lse = ad.reduce_sum(ad.logsumexp_lastdim(lg))
        diag = ad.reduce_sum(ad.mul(lg, eye))
        return ad.scale(ad.sub(lse, diag), 1.0 / n)

    both = ad.add(direction(logits), direction(ad.transpose(logits, (1, 0))))
    return ad.scale(both, 0.5)


def retrieval_top1(feats_a, feats_b):
    """Fraction of rows whose best match is their own positive (no grad)."""
    a = feats_a.data if isinstance(feats_a, ad.Tensor) else np.asarray(feats_a)
    b = feats_b.data if isinstance(feats_b, ad.Tensor) else np.asarray(feats_b)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    sims = a @ b.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(a))))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def head_param_shapes(cfg, contrast: ContrastConfig):
    """Entries for the mask token, reconstruction head (off stage-1
    features) and the 2-layer contrastive projector (off the pooled
    feature)."""
    c1 = cfg.embed_dim
    cf = cfg.stage_dim(cfg.num_stages - 1)
    p = cfg.patch_size
    yield "mask_token", (c1,)
    yield "recon.weight", (c1, 3 * p * p)
    yield "recon.bias", (3 * p * p,)
    yield "proj_head.fc1.weight", (cf, cf)
    yield "proj_head.fc1.bias", (cf,)
    yield "proj_head.fc2.weight", (cf, contrast.projection_dim)
    yield "proj_head.fc2.bias", (contrast.projection_dim,)


def reconstruction_head(feats, store, cfg):
    """Map stage-1-resolution tokens back to pixels, one patch per token."""
    b, t, c = feats.shape
    grid = cfg.stage_grid(0)
    if t != grid * grid or c != cfg.embed_dim:
        raise ContractError(f"reconstruction head expects stage-1 features, got {feats.shape}")
    p = cfg.patch_size
    x = ad.linear(feats, store["recon.weight"], store["recon.bias"])
    x = ad.reshape(x, (b, grid, grid, p, p, 3))
    x = ad.transpose(x, (0, 5, 1, 3, 2, 4))
    return ad.reshape(x, (b, 3, grid * p, grid * p))


def projection_head(pooled, store):
    """Two-layer MLP projector for the contrastive feature."""
    h = ad.linear(pooled, store["proj_head.fc1.weight"], store["proj_head.fc1.bias"])
    h = ad.gelu(h)
    return ad.linear(h, store["proj_head.fc2.weight"], store["proj_head.fc2.bias"])
