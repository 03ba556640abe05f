"""Coarse-to-fine token-grid transformer: prompts in, per-scale logits out.

The sequence is every scale's token grid concatenated coarse to fine.  Input
embeddings for scale k are built purely from tokens of scales < k (scale 1
sees only learned start content), and self-attention is block-causal: a
position attends to every position of its own and earlier scales.  Together
these make the logits at scale k a function of r_{<k} and the prompt alone,
which is what lets one teacher-forced pass score a whole trajectory and lets
sampling proceed scale by scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    add,
    backward,
    gather,
    gelu,
    layer_norm,
    matmul,
    mul,
    resize_array,
    softmax,
    suspend_taping,
)
from .errors import ConfigError, ContractError, NumericError, VocabularyError
from .losses import softmax_cross_entropy
from .optim import AdamWState, adamw_step, zero_grad
from .tokenizer import (
    DEFAULT_SCHEDULE,
    AutoencoderWeights,
    MultiScaleTokens,
    ScaleSchedule,
    _codebook_array,
    tokenize_image,
)

MASK_OFF = -1e30  # additive attention bias; exp underflows to exactly 0.0

NULL_TOKEN = "<null>"
SUBJECT_TOKEN = "<S*>"
PROMPT_LENGTH = 6


# ---------------------------------------------------------------------------
# prompt vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptVocab:
    """Closed prompt vocabulary; index 0 is the null token, 1 the subject slot."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 3:
            raise VocabularyError("vocabulary too small")
        if self.tokens[0] != NULL_TOKEN or self.tokens[1] != SUBJECT_TOKEN:
            raise VocabularyError("reserved tokens must sit at indices 0 and 1")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate vocabulary entries")

    @classmethod
    def build(cls, classes, backgrounds) -> "PromptVocab":
        words = (NULL_TOKEN, SUBJECT_TOKEN, "a", "on")
        return cls(words + tuple(sorted(classes)) + tuple(sorted(backgrounds)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def subject_index(self) -> int:
        return 1

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise VocabularyError(f"unknown prompt token: {token!r}") from None

    def encode(self, prompt: str, length: int = PROMPT_LENGTH) -> np.ndarray:
        """Whitespace-split lookup, zero-padded (null) to a fixed length."""
        words = prompt.split()
        if len(words) > length:
            raise VocabularyError("prompt longer than the fixed prompt length")
        ids = [self.index(w) for w in words]
        ids += [0] * (length - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def null_ids(self, length: int = PROMPT_LENGTH) -> np.ndarray:
        return np.zeros(length, dtype=np.int64)


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarConfig:
    width: int = 64
    blocks: int = 4
    heads: int = 4
    head_dim: int = 64
    ffn_hidden: int = 256
    vocab: int = 64
    channels: int = 16
    prompt_vocab: int = 11
    prompt_length: int = PROMPT_LENGTH
    schedule: ScaleSchedule = DEFAULT_SCHEDULE

    def __post_init__(self):
        for name in (
            "width",
            "blocks",
            "heads",
            "head_dim",
            "ffn_hidden",
            "vocab",
            "channels",
            "prompt_vocab",
            "prompt_length",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.schedule.validate_for_model(self.schedule.final)

    @property
    def attn_width(self) -> int:
        return self.heads * self.head_dim

    @property
    def positions(self) -> int:
        return self.schedule.positions()


ROLES = ("SA", "CA", "FFN", "NORM", "EMB", "TEXT", "HEAD")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class VarModel:
    """Parameter store plus role tags; all forward passes are free functions."""

    __slots__ = ("cfg", "vocab", "params", "roles")

    def __init__(
        self,
        cfg: VarConfig,
        vocab: PromptVocab,
        params: dict[str, Tensor],
        roles: dict[str, str],
    ):
        if vocab.size != cfg.prompt_vocab:
            raise ConfigError("vocabulary size disagrees with the model config")
        self.cfg = cfg
        self.vocab = vocab
        self.params = params
        self.roles = roles

    @classmethod
    def initialize(cls, cfg: VarConfig, vocab: PromptVocab, seed: int) -> "VarModel":
        rng = np.random.default_rng(seed)
        d, a, h = cfg.width, cfg.attn_width, cfg.ffn_hidden
        params: dict[str, Tensor] = {}
        roles: dict[str, str] = {}

        def put(name: str, role: str, value: np.ndarray) -> None:
            params[name] = Tensor(value, requires_grad=True)
            roles[name] = role

        put("embed.input_proj.w", "EMB", _xavier(rng, cfg.channels, d))
        put("embed.input_proj.b", "EMB", np.zeros(d))
        put("embed.pos", "EMB", rng.normal(0.0, 0.02, (cfg.positions, d)))
        put("embed.scale", "EMB", rng.normal(0.0, 0.02, (cfg.schedule.K, d)))
        put("text.prompt", "TEXT", rng.normal(0.0, 0.02, (cfg.prompt_vocab, d)))
        for i in range(cfg.blocks):
            for attn in ("sa", "ca"):
                role = attn.upper()
                put(f"block{i}.{attn}.wq", role, _xavier(rng, d, a))
                put(f"block{i}.{attn}.bq", role, np.zeros(a))
                # No key bias: under softmax it shifts every score for a
                # query by the same constant, so it can never train.
                put(f"block{i}.{attn}.wk", role, _xavier(rng, d, a))
                put(f"block{i}.{attn}.wv", role, _xavier(rng, d, a))
                put(f"block{i}.{attn}.bv", role, np.zeros(a))
                put(f"block{i}.{attn}.wo", role, _xavier(rng, a, d))
                put(f"block{i}.{attn}.bo", role, np.zeros(d))
            put(f"block{i}.ffn.w1", "FFN", _xavier(rng, d, h))
            put(f"block{i}.ffn.b1", "FFN", np.zeros(h))
            put(f"block{i}.ffn.w2", "FFN", _xavier(rng, h, d))
            put(f"block{i}.ffn.b2", "FFN", np.zeros(d))
            for ln in ("norm1", "norm2", "norm3"):
                put(f"block{i}.{ln}.g", "NORM", np.ones(d))
                put(f"block{i}.{ln}.b", "NORM", np.zeros(d))
        put("head.w", "HEAD", _xavier(rng, d, cfg.vocab))
        put("head.b", "HEAD", np.zeros(cfg.vocab))
        return cls(cfg, vocab, params, roles)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "VarModel":
        params = {
            k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()
        }
        return VarModel(self.cfg, self.vocab, params, dict(self.roles))


# ---------------------------------------------------------------------------
# sequence bookkeeping
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _scale_layout(extents: tuple) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per-position scale ids and per-scale start offsets for a schedule."""
    ids: list[int] = []
    offsets: list[int] = []
    total = 0
    for k, (h, w) in enumerate(extents):
        offsets.append(total)
        ids.extend([k] * (h * w))
        total += h * w
    arr = np.asarray(ids, dtype=np.int64)
    arr.setflags(write=False)
    return arr, tuple(offsets)


def prefix_positions(schedule: ScaleSchedule, upto: int) -> int:
    return sum(h * w for h, w in schedule.extents[:upto])


@lru_cache(maxsize=None)
def block_causal_mask(extents: tuple, upto: int) -> np.ndarray:
    """Additive (T, T) bias: 0 within/backward across scale blocks, off forward."""
    ids, _ = _scale_layout(extents)
    t = sum(h * w for h, w in extents[:upto])
    ids = ids[:t]
    mask = np.where(ids[None, :] <= ids[:, None], 0.0, MASK_OFF)
    mask.setflags(write=False)
    return mask


def build_scale_inputs(
    tokens: MultiScaleTokens, codebook, schedule: ScaleSchedule
) -> list[np.ndarray]:
    """Per-scale (h_k, w_k, C) input maps from strictly coarser scales.

    Scale 1 gets a zero map (its content is the model's learned start
    embeddings); scale k > 1 gets the running reconstruction of scales < k
    resampled to its extent.  By construction the k-th map never reads
    tokens at scales >= k.
    """
    cb = _codebook_array(codebook)
    tokens.validate(schedule, cb.shape[0])
    full = schedule.final
    acc = np.zeros((full[0], full[1], cb.shape[1]))
    out: list[np.ndarray] = []
    for k, (h, w) in enumerate(schedule.extents):
        out.append(np.zeros((h, w, cb.shape[1])) if k == 0 else resize_array(acc, (h, w)))
        acc = acc + resize_array(cb[tokens[k]], full)
    return out


def flatten_scale_inputs(maps: list[np.ndarray]) -> np.ndarray:
    """Concatenate per-scale maps into one (T, C) row-major sequence."""
    return np.concatenate([m.reshape(-1, m.shape[2]) for m in maps], axis=0)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _affine_norm(model: VarModel, site: str, x: Tensor) -> Tensor:
    y = layer_norm(x)
    return add(mul(y, model.params[f"{site}.g"]), model.params[f"{site}.b"])


def _attention(
    model: VarModel,
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    mask: np.ndarray | None,
) -> Tensor:
    cfg = model.cfg
    p = model.params
    b, tq, tk = q_in.shape[0], q_in.shape[1], kv_in.shape[1]

    def heads_of(x: Tensor, t: int) -> Tensor:
        return x.reshape((b, t, cfg.heads, cfg.head_dim)).transpose((0, 2, 1, 3))

    q = heads_of(add(matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.bq"]), tq)
    k = heads_of(matmul(kv_in, p[f"{prefix}.wk"]), tk)
    v = heads_of(add(matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.bv"]), tk)
    scores = mul(matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / np.sqrt(cfg.head_dim))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    mix = matmul(softmax(scores), v)
    flat = mix.transpose((0, 2, 1, 3)).reshape((b, tq, cfg.attn_width))
    return add(matmul(flat, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def forward_sequence(
    model: VarModel,
    input_rows: np.ndarray,
    prompt_ids: np.ndarray,
    upto: int | None = None,
) -> Tensor:
    """Logits (B, T', V) over the first ``upto`` scales of the schedule.

    ``input_rows`` is a (B, T', C) or (T', C) flattened scale-input sequence,
    treated as a constant; gradients flow to model parameters only.  Because
    attention is block-causal and inputs never read same-or-finer scales,
    truncating the sequence to a scale prefix leaves its logits unchanged.
    """
    cfg = model.cfg
    sched = cfg.schedule
    upto = sched.K if upto is None else int(upto)
    if upto < 1 or upto > sched.K:
        raise ContractError("scale prefix out of range")
    t = prefix_positions(sched, upto)
    ids, _ = _scale_layout(sched.extents)

    rows = np.asarray(input_rows, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[None]
    if rows.shape[1:] != (t, cfg.channels):
        raise ContractError("input rows do not match the scale prefix")
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.ndim == 1:
        prompt = np.broadcast_to(prompt, (rows.shape[0], prompt.shape[0]))
    if prompt.shape != (rows.shape[0], cfg.prompt_length):
        raise ContractError("prompt ids must be (B, prompt_length)")
    if prompt.min() < 0 or prompt.max() >= cfg.prompt_vocab:
        raise VocabularyError("prompt id outside the vocabulary")

    p = model.params
    b = rows.shape[0]
    x = add(matmul(Tensor(rows), p["embed.input_proj.w"]), p["embed.input_proj.b"])
    x = add(x, gather(p["embed.pos"], np.arange(t)))
    x = add(x, gather(p["embed.scale"], ids[:t]))
    prompt_seq = gather(p["text.prompt"], prompt.reshape(-1)).reshape(
        (b, cfg.prompt_length, cfg.width)
    )
    mask = block_causal_mask(sched.extents, upto)
    for i in range(cfg.blocks):
        sa_in = _affine_norm(model, f"block{i}.norm1", x)
        x = add(x, _attention(model, f"block{i}.sa", sa_in, sa_in, mask))
        ca_in = _affine_norm(model, f"block{i}.norm2", x)
        x = add(x, _attention(model, f"block{i}.ca", ca_in, prompt_seq, None))
        y = _affine_norm(model, f"block{i}.norm3", x)
        y = gelu(add(matmul(y, p[f"block{i}.ffn.w1"]), p[f"block{i}.ffn.b1"]))
        y = add(matmul(y, p[f"block{i}.ffn.w2"]), p[f"block{i}.ffn.b2"])
        x = add(x, y)
    return add(matmul(x, p["head.w"]), p["head.b"])


def forward_logits(
    model: VarModel,
    tokens: MultiScaleTokens,
    prompt_ids: np.ndarray,
    codebook,
) -> list[np.ndarray]:
    """Teacher-forced per-scale logit grids [(h_k, w_k, V)], detached."""
    sched = model.cfg.schedule
    rows = flatten_scale_inputs(build_scale_inputs(tokens, codebook, sched))
    out = forward_sequence(model, rows, prompt_ids).data[0]
    _, offsets = _scale_layout(sched.extents)
    grids = []
    for k, (h, w) in enumerate(sched.extents):
        start = offsets[k]
        grids.append(out[start : start + h * w].reshape(h, w, model.cfg.vocab))
    return grids


def scale_slices(
    logits: Tensor, schedule: ScaleSchedule, batch: int
) -> list[Tensor]:
    """Split (B, T, V) logits into per-scale (B*h_k*w_k, V) row blocks."""
    _, offsets = _scale_layout(schedule.extents)
    t = prefix_positions(schedule, schedule.K)
    flat = logits.reshape((batch * t, logits.shape[2]))
    out = []
    for k, (h, w) in enumerate(schedule.extents):
        n = h * w
        idx = (np.arange(batch)[:, None] * t + (offsets[k] + np.arange(n))[None, :]).reshape(-1)
        out.append(gather(flat, idx))
    return out


def scale_targets(
    token_batch: list[MultiScaleTokens], schedule: ScaleSchedule
) -> list[np.ndarray]:
    """Per-scale flattened target ids matching ``scale_slices`` row order."""
    out = []
    for k in range(schedule.K):
        out.append(np.concatenate([t[k].reshape(-1) for t in token_batch]))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = 1.0
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.cfg_scale) or self.cfg_scale < 0.0:
            raise ConfigError("cfg_scale must be finite and >= 0")
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise ConfigError("temperature must be finite and > 0")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be a positive integer or omitted")


def guided_logits(cond: np.ndarray, null: np.ndarray, scale: float) -> np.ndarray:
    """Blend unconditional and conditional logits with guidance strength.

    Written as (1-s)*null + s*cond so the s=0 and s=1 endpoints reproduce
    the respective branch bit-for-bit (the additive rearrangement
    null + s*(cond - null) is algebraically equal but not float-exact at
    s=1).
    """
    return (1.0 - scale) * null + scale * cond


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample per row; deterministic given the generator state."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = np.sum(cum < u[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def sampling_distribution(guided: np.ndarray, sampler: SamplerConfig) -> np.ndarray:
    """Per-row probabilities after temperature and top-k shaping.

    temperature < 1e-6 is the argmax limit: a point mass on the first
    maximal logit.  Top-k keeps the k largest logits per row, resolving
    ties toward lower indices.
    """
    if sampler.temperature < 1e-6:
        probs = np.zeros_like(guided)
        probs[np.arange(guided.shape[0]), np.argmax(guided, axis=1)] = 1.0
        return probs
    z = guided / sampler.temperature
    if sampler.top_k is not None and sampler.top_k < z.shape[1]:
        order = np.argsort(-z, axis=1, kind="stable")  # ties keep lowest index
        keep = order[:, : sampler.top_k]
        masked = np.full_like(z, -np.inf)
        np.put_along_axis(masked, keep, np.take_along_axis(z, keep, axis=1), axis=1)
        z = masked
    finite = np.where(np.isfinite(z), z, -np.inf)
    zmax = finite.max(axis=1, keepdims=True)
    e = np.exp(finite - zmax)
    return e / e.sum(axis=1, keepdims=True)


def _mean_entropy(probs: np.ndarray) -> float:
    terms = np.where(probs > 0.0, probs * np.log(np.where(probs > 0.0, probs, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1)))


def sample_trace(
    model: VarModel,
    prompt,
    codebook,
    sampler: SamplerConfig,
) -> tuple[MultiScaleTokens, dict]:
    """Scale-by-scale ancestral sampling with classifier-free guidance.

    Returns the sampled token maps plus a trace carrying the per-scale mean
    entropy (nats) of the distributions actually sampled from.  Each scale
    runs one batched forward holding the conditional and null prompts; the
    block-causal mask makes prefix logits identical to full-sequence logits,
    so teacher-forcing the returned tokens reproduces the sampling logits.
    """
    cfg = model.cfg
    sched = cfg.schedule
    cb = _codebook_array(codebook)
    if cb.shape[0] != cfg.vocab or cb.shape[1] != cfg.channels:
        raise ContractError("codebook does not match the model config")
    prompt_ids = (
        model.vocab.encode(prompt, cfg.prompt_length)
        if isinstance(prompt, str)
        else np.asarray(prompt, dtype=np.int64)
    )
    if prompt_ids.shape != (cfg.prompt_length,):
        raise ContractError("prompt ids must be a fixed-length vector")
    pair = np.stack([prompt_ids, model.vocab.null_ids(cfg.prompt_length)])

    rng = np.random.default_rng(sampler.seed)
    full = sched.final
    acc = np.zeros((full[0], full[1], cfg.channels))
    rows = np.zeros((0, cfg.channels))
    maps: list[np.ndarray] = []
    entropies: list[float] = []
    with suspend_taping():  # sampling is never differentiable
        for k, (h, w) in enumerate(sched.extents):
            step = np.zeros((h, w, cfg.channels)) if k == 0 else resize_array(acc, (h, w))
            rows = np.concatenate([rows, step.reshape(-1, cfg.channels)], axis=0)
            out = forward_sequence(model, np.stack([rows, rows]), pair, upto=k + 1).data
            start = prefix_positions(sched, k)
            guided = guided_logits(out[0, start:], out[1, start:], sampler.cfg_scale)
            probs = sampling_distribution(guided, sampler)
            if sampler.temperature < 1e-6:
                chosen = np.argmax(guided, axis=1).astype(np.int64)
            else:
                chosen = _categorical_rows(probs, rng)
            maps.append(chosen.reshape(h, w))
            entropies.append(_mean_entropy(probs))
            acc = acc + resize_array(cb[chosen.reshape(h, w)], full)
    tokens = MultiScaleTokens(maps)
    return tokens, {"per_scale_entropy": entropies, "cfg_scale": sampler.cfg_scale}


def sample(
    model: VarModel, prompt, codebook, sampler: SamplerConfig
) -> MultiScaleTokens:
    tokens, _ = sample_trace(model, prompt, codebook, sampler)
    return tokens


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.0
    null_prompt_rate: float = 0.1
    context_drop_rate: float = 0.2

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not (0.0 <= self.null_prompt_rate <= 1.0):
            raise ConfigError("null_prompt_rate must lie in [0, 1]")
        if not (0.0 <= self.context_drop_rate <= 1.0):
            raise ConfigError("context_drop_rate must lie in [0, 1]")
        if self.null_prompt_rate + self.context_drop_rate > 1.0:
            raise ConfigError("dropout rates may not sum past 1")


def sequence_ce_terms(
    logits: Tensor, token_batch: list[MultiScaleTokens], schedule: ScaleSchedule
) -> list[Tensor]:
    """Per-scale mean cross-entropy terms for a teacher-forced batch."""
    slices = scale_slices(logits, schedule, len(token_batch))
    targets = scale_targets(token_batch, schedule)
    return [softmax_cross_entropy(s, t) for s, t in zip(slices, targets)]


def pretrain(
    model: VarModel,
    examples,
    tokenizer_weights: AutoencoderWeights,
    config: PretrainConfig | None = None,
    seed: int = 0,
) -> list[dict]:
    """Teacher-forced maximum likelihood over (image, prompt) pairs.

    The loss is the sum over scales of the per-scale mean cross-entropy.
    Prompts drop to the all-null prompt at ``null_prompt_rate`` (training
    the guidance branch) and lose their context suffix at
    ``context_drop_rate`` (keeping bare class prompts in distribution).
    Tokenization happens once up front; training is pure parameter updates.
    """
    config = config or PretrainConfig()
    cfg = model.cfg
    sched = cfg.schedule
    if not examples:
        raise ContractError("empty pretraining set")
    cb = tokenizer_weights.codebook
    if cb.shape != (cfg.vocab, cfg.channels):
        raise ContractError("tokenizer codebook does not match the model config")

    token_cache: list[MultiScaleTokens] = []
    row_cache = np.empty((len(examples), cfg.positions, cfg.channels))
    full_ids = np.empty((len(examples), cfg.prompt_length), dtype=np.int64)
    bare_ids = np.empty_like(full_ids)
    for i, ex in enumerate(examples):
        toks = tokenize_image(ex.image, tokenizer_weights)
        token_cache.append(toks)
        row_cache[i] = flatten_scale_inputs(build_scale_inputs(toks, cb, sched))
        full_ids[i] = model.vocab.encode(ex.prompt, cfg.prompt_length)
        bare_ids[i] = model.vocab.encode(f"a {ex.class_name}", cfg.prompt_length)

    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    null = model.vocab.null_ids(cfg.prompt_length)
    rows_out: list[dict] = []
    for step in range(1, config.steps + 1):
        batch = rng.integers(0, len(examples), size=config.batch_size)
        prompts = np.empty((config.batch_size, cfg.prompt_length), dtype=np.int64)
        for j, i in enumerate(batch):
            u = rng.random()
            if u < config.null_prompt_rate:
                prompts[j] = null
            elif u < config.null_prompt_rate + config.context_drop_rate:
                prompts[j] = bare_ids[i]
            else:
                prompts[j] = full_ids[i]

        zero_grad(params)
        with Tape() as tape:
            logits = forward_sequence(model, row_cache[batch], prompts)
            terms = sequence_ce_terms(logits, [token_cache[i] for i in batch], sched)
            loss = terms[0]
            for t in terms[1:]:
                loss = loss + t
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(f"pretraining loss diverged at step {step}")
            backward(loss, tape)
        adamw_step(params, state=state)
        row = {"step": step, "loss": loss_value}
        for k, t in enumerate(terms, start=1):
            row[f"ce_scale_{k}"] = t.item()
        rows_out.append(row)
    return rows_out
