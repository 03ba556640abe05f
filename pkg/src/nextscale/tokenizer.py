"""Multi-scale residual-quantizing image tokenizer.

A small per-patch autoencoder maps a 32x32 RGB image to an (n, n, C) feature
grid and back.  The quantizer turns a feature grid into K token maps over a
coarse-to-fine scale schedule: at each scale the *remaining* residual is
downsampled, matched to the nearest codebook entry per position, and the
chosen codewords are upsampled back to full resolution and subtracted before
the next scale runs.  Summing all upsampled lookups reconstructs the grid, so
the residual chain telescopes exactly.

Feature grids are stored channels-last: (h, w, C).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    backward,
    bilinear_resize,
    gather,
    gelu,
    matmul,
    resize_array,
    tensor_mean,
    zero_grad,
)
from .errors import ContractError, NumericError
from .optim import AdamWState, adamw_step


# ---------------------------------------------------------------------------
# schedule / codebook / token containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered list of (h, w) token-map extents, coarse to fine.

    Construction enforces mechanical soundness only (positive, non-decreasing
    extents), so degenerate schedules remain expressible for edge-case tests.
    Model-grade schedules additionally need K >= 2, at least one strictly
    growing step, and a final extent equal to the feature grid; see
    ``validate_for_model``.
    """

    extents: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ext = tuple((int(h), int(w)) for h, w in self.extents)
        object.__setattr__(self, "extents", ext)
        if len(ext) < 1:
            raise ContractError("schedule needs at least one scale")
        for h, w in ext:
            if h < 1 or w < 1:
                raise ContractError("scale extents must be positive")
        for (h0, w0), (h1, w1) in zip(ext, ext[1:]):
            if h1 < h0 or w1 < w0:
                raise ContractError("scale extents must be non-decreasing")

    @property
    def K(self) -> int:
        return len(self.extents)

    @property
    def final(self) -> tuple[int, int]:
        return self.extents[-1]

    def positions(self) -> int:
        return sum(h * w for h, w in self.extents)

    def validate_for_model(self, feature_hw: tuple[int, int]) -> None:
        if self.K < 2:
            raise ContractError("model schedules need at least two scales")
        if not any(
            h1 > h0 or w1 > w0
            for (h0, w0), (h1, w1) in zip(self.extents, self.extents[1:])
        ):
            raise ContractError("model schedules must grow at least once")
        if self.final != tuple(feature_hw):
            raise ContractError("final scale must match the feature grid")


DEFAULT_SCHEDULE = ScaleSchedule(((1, 1), (2, 2), (4, 4), (6, 6), (8, 8)))


@dataclass(frozen=True)
class Codebook:
    """V x C codeword table; rows must be finite and pairwise distinct."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError("codebook must be a (V, C) matrix")
        if not np.all(np.isfinite(arr)):
            raise NumericError("codebook entries must be finite")
        if len(np.unique(arr, axis=0)) != arr.shape[0]:
            raise ContractError("codebook entries must be distinct")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def _codebook_array(codebook) -> np.ndarray:
    arr = np.asarray(getattr(codebook, "entries", codebook), dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("codebook must be a (V, C) matrix")
    return arr


class MultiScaleTokens:
    """One integer token map per scale, coarse to fine, read-only."""

    __slots__ = ("maps",)

    def __init__(self, maps: Iterable[np.ndarray]):
        frozen = []
        for m in maps:
            a = np.asarray(m)
            if not np.issubdtype(a.dtype, np.integer):
                raise ContractError("token maps must be integral")
            if a.ndim != 2:
                raise ContractError("token maps must be 2-D")
            a = a.astype(np.int64, copy=True)
            a.setflags(write=False)
            frozen.append(a)
        if not frozen:
            raise ContractError("need at least one token map")
        self.maps = tuple(frozen)

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, k) -> np.ndarray:
        return self.maps[k]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MultiScaleTokens)
            and len(self) == len(other)
            and all(np.array_equal(a, b) for a, b in zip(self.maps, other.maps))
        )

    def flat(self) -> np.ndarray:
        """Scale-major, row-major flattening: the model's sequence order."""
        return np.concatenate([m.reshape(-1) for m in self.maps])

    def validate(self, schedule: ScaleSchedule, vocab: int) -> None:
        if len(self.maps) != schedule.K:
            raise ContractError("token maps do not match the schedule length")
        for m, (h, w) in zip(self.maps, schedule.extents):
            if m.shape != (h, w):
                raise ContractError("token map extent mismatch")
            if m.size and (m.min() < 0 or m.max() >= vocab):
                raise IndexError("token outside the codebook range")


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 32
    patch: int = 4
    channels: int = 16
    vocab: int = 64
    hidden: int = 64
    blocks: int = 2
    schedule: ScaleSchedule = DEFAULT_SCHEDULE

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ContractError("patch size must divide the image size")
        n = self.image_size // self.patch
        self.schedule.validate_for_model((n, n))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch


class AutoencoderWeights:
    """Parameter bundle for the patch autoencoder plus its codebook."""

    def __init__(self, cfg: AutoencoderConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: AutoencoderConfig, seed: int) -> "AutoencoderWeights":
        rng = np.random.default_rng(seed)

        def lin(fan_in, fan_out):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            return Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)

        def bias(n):
            return Tensor(np.zeros(n), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["enc.patch.w"] = lin(cfg.patch_dim, cfg.channels)
        p["enc.patch.b"] = bias(cfg.channels)
        for i in range(cfg.blocks):
            p[f"enc.mlp{i}.w1"] = lin(cfg.channels, cfg.hidden)
            p[f"enc.mlp{i}.b1"] = bias(cfg.hidden)
            p[f"enc.mlp{i}.w2"] = lin(cfg.hidden, cfg.channels)
            p[f"enc.mlp{i}.b2"] = bias(cfg.channels)
        for i in range(cfg.blocks):
            p[f"dec.mlp{i}.w1"] = lin(cfg.channels, cfg.hidden)
            p[f"dec.mlp{i}.b1"] = bias(cfg.hidden)
            p[f"dec.mlp{i}.w2"] = lin(cfg.hidden, cfg.channels)
            p[f"dec.mlp{i}.b2"] = bias(cfg.channels)
        p["dec.unpatch.w"] = lin(cfg.channels, cfg.patch_dim)
        p["dec.unpatch.b"] = bias(cfg.patch_dim)
        # placeholder codebook; training replaces it with data-anchored rows
        p["codebook"] = Tensor(
            rng.normal(0.0, 0.5, (cfg.vocab, cfg.channels)), requires_grad=True
        )
        return cls(cfg, p)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    @property
    def codebook(self) -> np.ndarray:
        return self.params["codebook"].data

    def codebook_view(self) -> Codebook:
        return Codebook(self.params["codebook"].data)


def _patchify(images: Tensor, cfg: AutoencoderConfig) -> Tensor:
    """(B, H, W, 3) -> (B, n, n, patch_dim)."""
    b = images.shape[0]
    n, p = cfg.grid, cfg.patch
    x = images.reshape((b, n, p, n, p, 3))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, n, n, cfg.patch_dim))


def _unpatchify(x: Tensor, cfg: AutoencoderConfig) -> Tensor:
    b = x.shape[0]
    n, p = cfg.grid, cfg.patch
    x = x.reshape((b, n, n, p, p, 3))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, cfg.image_size, cfg.image_size, 3))


def _mlp_stack(x: Tensor, weights: AutoencoderWeights, prefix: str) -> Tensor:
    p = weights.params
    for i in range(weights.cfg.blocks):
        h = matmul(x, p[f"{prefix}.mlp{i}.w1"]) + p[f"{prefix}.mlp{i}.b1"]
        h = matmul(gelu(h), p[f"{prefix}.mlp{i}.w2"]) + p[f"{prefix}.mlp{i}.b2"]
        x = x + h
    return x


def encode_batch(images: Tensor, weights: AutoencoderWeights) -> Tensor:
    """Differentiable encoder: (B, H, W, 3) -> (B, n, n, C)."""
    cfg = weights.cfg
    x = _patchify(images, cfg)
    x = matmul(x, weights.params["enc.patch.w"]) + weights.params["enc.patch.b"]
    return _mlp_stack(x, weights, "enc")


def decode_batch(features: Tensor, weights: AutoencoderWeights) -> Tensor:
    """Differentiable decoder: (B, n, n, C) -> (B, H, W, 3), unclamped."""
    cfg = weights.cfg
    x = _mlp_stack(features, weights, "dec")
    x = matmul(x, weights.params["dec.unpatch.w"]) + weights.params["dec.unpatch.b"]
    return _unpatchify(x, cfg)


def _check_image(image: np.ndarray, cfg: AutoencoderConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (cfg.image_size, cfg.image_size, 3):
        raise ContractError("image extent mismatch")
    if not np.all(np.isfinite(img)):
        raise NumericError("image must be finite")
    if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
        raise ContractError("image values must lie in [0, 1]")
    return img


def encode_image(image: np.ndarray, weights: AutoencoderWeights) -> np.ndarray:
    """Encode one [0,1] RGB image to an (n, n, C) feature grid."""
    img = _check_image(image, weights.cfg)
    out = encode_batch(Tensor(img[None]), weights)
    return out.data[0]


def decode_feature(feature: np.ndarray, weights: AutoencoderWeights) -> np.ndarray:
    """Decode an (n, n, C) feature grid to an image, clamped to [0, 1]."""
    f = np.asarray(feature, dtype=np.float64)
    n = weights.cfg.grid
    if f.shape != (n, n, weights.cfg.channels):
        raise ContractError("feature extent mismatch")
    out = decode_batch(Tensor(f[None]), weights).data[0]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# multi-scale quantization
# ---------------------------------------------------------------------------


def nearest_codeword(vectors: np.ndarray, codebook) -> np.ndarray:
    """Row index of the closest codeword per vector; ties pick the lowest index."""
    cb = _codebook_array(codebook)
    if cb.shape[0] < 1:
        raise ContractError("codebook has no entries")
    x = np.asarray(vectors, dtype=np.float64)
    diff = x[:, None, :] - cb[None, :, :]
    d = np.einsum("nvc,nvc->nv", diff, diff)
    return np.argmin(d, axis=1)


def quantize_multiscale(
    feature: np.ndarray,
    codebook,
    schedule: ScaleSchedule,
    return_diagnostics: bool = False,
):
    """Greedy coarse-to-fine residual quantization of one feature grid.

    Scale k sees the residual of everything chosen so far, downsampled to its
    extent; the winning codewords are upsampled to the full grid and folded
    into the running reconstruction.  Diagnostics expose the residual fed to
    each scale, its downsampled form, and the running reconstruction after
    each scale (all at full resolution, summed coarse-to-fine).
    """
    cb = _codebook_array(codebook)
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != cb.shape[1]:
        raise ContractError("feature grid and codebook channel mismatch")
    if schedule.final != f.shape[:2]:
        raise ContractError("final scale must match the feature grid")
    if not np.all(np.isfinite(f)):
        raise NumericError("feature grid must be finite")

    full = f.shape[:2]
    acc = np.zeros_like(f)
    maps: list[np.ndarray] = []
    residuals: list[np.ndarray] = []
    downs: list[np.ndarray] = []
    partials: list[np.ndarray] = []
    for h, w in schedule.extents:
        res = f - acc
        down = resize_array(res, (h, w))
        idx = nearest_codeword(down.reshape(-1, cb.shape[1]), cb).reshape(h, w)
        maps.append(idx)
        acc = acc + resize_array(cb[idx], full)
        residuals.append(res)
        downs.append(down)
        partials.append(acc)
    tokens = MultiScaleTokens(maps)
    if return_diagnostics:
        return tokens, {
            "residuals": residuals,
            "downsampled": downs,
            "partials": partials,
        }
    return tokens


def dequantize(
    tokens: MultiScaleTokens,
    codebook,
    schedule: ScaleSchedule,
    scales: int | None = None,
) -> np.ndarray:
    """Sum of upsampled codeword lookups over the first ``scales`` maps.

    ``scales=None`` uses every scale.  Summation runs coarse-to-fine, matching
    the quantizer's own accumulation order bit for bit.
    """
    cb = _codebook_array(codebook)
    tokens.validate(schedule, cb.shape[0])
    k = schedule.K if scales is None else int(scales)
    if k < 0 or k > schedule.K:
        raise ContractError("scale prefix out of range")
    full = schedule.final
    acc = np.zeros((full[0], full[1], cb.shape[1]))
    for m in tokens.maps[:k]:
        acc = acc + resize_array(cb[m], full)
    return acc


def tokenize_image(
    image: np.ndarray, weights: AutoencoderWeights
) -> MultiScaleTokens:
    """encode + quantize with the weights' own codebook and schedule."""
    f = encode_image(image, weights)
    return quantize_multiscale(f, weights.codebook, weights.cfg.schedule)


def detokenize_image(
    tokens: MultiScaleTokens, weights: AutoencoderWeights
) -> np.ndarray:
    """dequantize + decode, clamped to [0, 1]."""
    f = dequantize(tokens, weights.codebook, weights.cfg.schedule)
    return decode_feature(f, weights)


def token_rows(tokens: MultiScaleTokens) -> list[tuple[int, int, int, int]]:
    """Flatten token maps to (scale, row, col, token) rows; scale is 1-based."""
    rows = []
    for k, m in enumerate(tokens.maps, start=1):
        for r in range(m.shape[0]):
            for c in range(m.shape[1]):
                rows.append((k, r, c, int(m[r, c])))
    return rows


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenizerTrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.0
    commitment: float = 0.25
    revive_every: int = 40


def _seed_codebook(
    weights: AutoencoderWeights, images: np.ndarray, rng: np.random.Generator
) -> None:
    """Anchor codewords in the untrained encoder's feature distribution."""
    cfg = weights.cfg
    take = images[rng.choice(len(images), size=min(len(images), 64), replace=False)]
    feats = encode_batch(Tensor(take), weights).data.reshape(-1, cfg.channels)
    pick = rng.choice(feats.shape[0], size=cfg.vocab, replace=feats.shape[0] < cfg.vocab)
    entries = feats[pick] + rng.normal(0.0, 1e-3, (cfg.vocab, cfg.channels))
    Codebook(entries)  # asserts distinct rows
    weights.params["codebook"] = Tensor(entries, requires_grad=True)


def train_autoencoder(
    images: np.ndarray,
    cfg: AutoencoderConfig | None = None,
    train: TokenizerTrainConfig | None = None,
    seed: int = 0,
) -> tuple[AutoencoderWeights, list[dict]]:
    """Fit the autoencoder and codebook on an (N, H, W, 3) image stack.

    The objective per image is reconstruction MSE through the quantizer with
    straight-through gradients, plus the codeword-pull term and the
    commitment term (coefficient ``commitment``) applied per scale on the
    downsampled residual targets.  Codewords unused since the previous check
    are re-seeded from live residual vectors, keeping the codebook occupied.
    Returns the weights and one metrics row per step.
    """
    cfg = cfg or AutoencoderConfig()
    train = train or TokenizerTrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ContractError("expected an (N, H, W, 3) image stack")
    if len(images) < 1:
        raise ContractError("empty training set")

    rng = np.random.default_rng(seed)
    weights = AutoencoderWeights.initialize(cfg, seed=rng.integers(2**31))
    _seed_codebook(weights, images, rng)
    params = weights.parameters()
    state = AdamWState(lr=train.lr, weight_decay=train.weight_decay)
    schedule = cfg.schedule
    full = (cfg.grid, cfg.grid)

    usage = np.zeros(cfg.vocab, dtype=np.int64)
    rows: list[dict] = []
    for step in range(1, train.steps + 1):
        batch_idx = rng.integers(0, len(images), size=train.batch_size)
        batch = images[batch_idx]
        cb_param = weights.params["codebook"]

        zero_grad(params)
        with Tape() as tape:
            feats = encode_batch(Tensor(batch), weights)  # (B, n, n, C)
            fdata = feats.data
            hats = np.empty_like(fdata)
            idx_by_scale: list[list[np.ndarray]] = [[] for _ in range(schedule.K)]
            tgt_by_scale: list[list[np.ndarray]] = [[] for _ in range(schedule.K)]
            commit_terms = []
            pool: list[np.ndarray] = []
            for i in range(train.batch_size):
                tokens, diag = quantize_multiscale(
                    fdata[i], cb_param.data, schedule, return_diagnostics=True
                )
                hats[i] = diag["partials"][-1]
                f_i = gather(feats, np.array([i])).reshape(fdata.shape[1:])
                for k, (h, w) in enumerate(schedule.extents):
                    usage[np.unique(tokens[k])] += 1
                    chosen = cb_param.data[tokens[k]].reshape(-1, cfg.channels)
                    idx_by_scale[k].append(tokens[k].reshape(-1))
                    tgt_by_scale[k].append(
                        diag["downsampled"][k].reshape(-1, cfg.channels)
                    )
                    pool.append(tgt_by_scale[k][-1])
                    # down(f - acc_{k-1}) with the constant part folded away:
                    # only the encoder output stays on the tape
                    prev = diag["partials"][k - 1] if k else np.zeros_like(fdata[i])
                    const = resize_array(prev, (h, w)) + chosen.reshape(h, w, -1)
                    d = bilinear_resize(f_i, (h, w)) - Tensor(const)
                    commit_terms.append(tensor_mean(d * d))
            # straight-through reconstruction
            f_st = feats + Tensor(hats - fdata)
            recon_b = decode_batch(f_st, weights)
            diff = recon_b - Tensor(batch)
            loss_recon = tensor_mean(diff * diff)
            # codeword pull: per-scale mean so coarse codewords are not
            # drowned out by the position-heavy fine scales, summed over k
            loss_code = None
            for k in range(schedule.K):
                e = gather(cb_param, np.concatenate(idx_by_scale[k]))
                pd = e - Tensor(np.concatenate(tgt_by_scale[k]))
                term = tensor_mean(pd * pd)
                loss_code = term if loss_code is None else loss_code + term
            # commitment mirrors that weighting: sum over scales, mean over batch
            loss_commit = commit_terms[0]
            for t in commit_terms[1:]:
                loss_commit = loss_commit + t
            loss_commit = loss_commit / train.batch_size
            loss = loss_recon + loss_code + train.commitment * loss_commit
        if not np.isfinite(loss.data):
            raise NumericError(f"tokenizer training diverged at step {step}")
        backward(loss, tape)
        adamw_step(params, None, state)

        rows.append(
            {
                "step": step,
                "loss": float(loss.data),
                "recon": float(loss_recon.data),
                "codebook": float(loss_code.data),
                "commit": float(loss_commit.data),
            }
        )

        if train.revive_every and step % train.revive_every == 0:
            dead = np.flatnonzero(usage == 0)
            if dead.size:
                feed = np.concatenate(pool)
                picks = rng.choice(feed.shape[0], size=dead.size)
                fresh = feed[picks] + rng.normal(0.0, 1e-4, (dead.size, cfg.channels))
                cb_param.data[dead] = fresh
            usage[:] = 0

    return weights, rows


def codebook_usage(
    images: np.ndarray, weights: AutoencoderWeights
) -> tuple[np.ndarray, float]:
    """Token histogram over a corpus and the fraction of codewords ever used."""
    counts = np.zeros(weights.cfg.vocab, dtype=np.int64)
    for img in images:
        tokens = tokenize_image(img, weights)
        for m in tokens:
            counts += np.bincount(m.reshape(-1), minlength=weights.cfg.vocab)
    return counts, float((counts > 0).mean())
