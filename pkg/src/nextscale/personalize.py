"""Subject personalization: selective tuning, weighted CE, prior distillation.

A pretrained prior is adapted to a handful of subject images by training a
masked subset of its parameters (cross-attention, feed-forward, and the
dedicated subject-token embedding row by default) on a scale-weighted
cross-entropy, optionally regularized toward the frozen original model.
The regularizer comes in two flavors: trajectory distillation (the frozen
model samples token maps from the bare class prompt and the student is
pulled toward the frozen model's per-position distributions on them) and a
replay bank of pre-generated class token maps scored with plain
cross-entropy.  Low-rank adapters are available as an alternative
parameterization for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tape, Tensor, add, backward, matmul, suspend_taping, zero_grad
from .errors import ConfigError, ContractError, NumericError
from .losses import kl_divergence, softmax_cross_entropy
from .model import (
    SUBJECT_TOKEN,
    SamplerConfig,
    VarModel,
    build_scale_inputs,
    flatten_scale_inputs,
    forward_sequence,
    prefix_positions,
    sample,
    scale_slices,
    scale_targets,
)
from .optim import AdamWState, adamw_step
from .synthetic import augment
from .tokenizer import (
    AutoencoderWeights,
    MultiScaleTokens,
    _codebook_array,
    tokenize_image,
)

DEFAULT_TRAINABLE = ("CA", "FFN", "subject_embedding")
SELECTABLE = ("SA", "CA", "FFN", "NORM", "subject_embedding")
LORA_ROLES = ("SA", "CA", "FFN")


# ---------------------------------------------------------------------------
# trainable-parameter selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuningMask:
    """Per-parameter trainable flags; the prompt table may be masked per row.

    ``flags[name]`` is either a plain bool covering the whole tensor or a
    boolean array of the tensor's shape (used to free single embedding
    rows).  The mask is enforced by handing the optimizer only the flagged
    parameters, with elementwise masks where a tensor is partially free.
    """

    flags: dict[str, bool | np.ndarray]

    def is_trainable(self, name: str) -> bool:
        flag = self.flags[name]
        return bool(np.any(flag)) if isinstance(flag, np.ndarray) else flag

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self.flags) if self.is_trainable(n)]

    def frozen_names(self) -> list[str]:
        return [n for n in sorted(self.flags) if not self.is_trainable(n)]

    def trainable_count(self, model: VarModel) -> int:
        total = 0
        for name, flag in self.flags.items():
            if isinstance(flag, np.ndarray):
                total += int(flag.sum())
            elif flag:
                total += model.params[name].size
        return total

    def optimizer_views(self, model: VarModel):
        """(params, masks) for the optimizer: flagged tensors only."""
        params, masks = [], []
        for name in self.trainable_names():
            flag = self.flags[name]
            params.append(model.params[name])
            masks.append(flag if isinstance(flag, np.ndarray) else None)
        return params, masks


def select_trainable(model: VarModel, roles=None) -> TuningMask:
    """Build the mask freeing exactly the named roles.

    ``roles`` is an iterable over {SA, CA, FFN, NORM, subject_embedding},
    the string "all" for full fine-tuning, or omitted for the default
    (CA, FFN, and the subject embedding row).  "subject_embedding" frees a
    single row of the prompt table; the rest of the table stays frozen.
    """
    if roles is None:
        roles = DEFAULT_TRAINABLE
    flags: dict[str, bool | np.ndarray] = {}
    if isinstance(roles, str) and roles == "all":
        for name in model.params:
            flags[name] = True
        return TuningMask(flags)

    chosen = tuple(roles)
    unknown = set(chosen) - set(SELECTABLE)
    if unknown:
        raise ContractError(f"unknown trainable roles: {sorted(unknown)}")
    layer_roles = {r for r in chosen if r != "subject_embedding"}
    for name, role in model.roles.items():
        flags[name] = role in layer_roles
    if "subject_embedding" in chosen:
        table = model.params["text.prompt"]
        row_mask = np.zeros(table.shape, dtype=bool)
        row_mask[model.vocab.subject_index] = True
        flags["text.prompt"] = row_mask
    return TuningMask(flags)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_weights(weights, k: int) -> tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if len(w) != k:
        raise ContractError(f"need one weight per scale ({k}), got {len(w)}")
    if not all(np.isfinite(x) and x >= 0.0 for x in w):
        raise ContractError("scale weights must be finite and non-negative")
    if any(a < b for a, b in zip(w, w[1:])):
        raise ContractError("scale weights must be non-increasing coarse to fine")
    return w


def weighted_ce_loss(per_scale_logits, tokens: MultiScaleTokens, weights) -> Tensor:
    """Sum over scales of weight times the scale's position-mean CE.

    ``per_scale_logits`` holds one (h_k, w_k, V) or (n_k, V) tensor per
    scale.  Zero-weight scales are skipped outright, so the result is
    exactly invariant to their logits, not just up to a multiplied zero.
    """
    if len(per_scale_logits) != len(tokens):
        raise ContractError("one logits grid per token map required")
    w = _check_weights(weights, len(tokens))
    total: Tensor | None = None
    for k, (grid, wk) in enumerate(zip(per_scale_logits, w)):
        if wk == 0.0:
            continue
        t = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=np.float64))
        rows = t.reshape((-1, t.shape[-1]))
        targets = np.asarray(tokens[k]).reshape(-1)
        if rows.shape[0] != targets.size:
            raise ContractError(f"scale {k + 1} logits do not match its token map")
        term = softmax_cross_entropy(rows, targets) * wk
        total = term if total is None else total + term
    if total is None:  # every weight zero
        return Tensor(np.asarray(0.0))
    return total


def _weighted_sequence_ce(
    logits: Tensor, token_batch: list[MultiScaleTokens], schedule, weights
) -> Tensor:
    """Batched form of the weighted loss over a (B, T, V) logit sequence."""
    w = _check_weights(weights, schedule.K)
    slices = scale_slices(logits, schedule, len(token_batch))
    targets = scale_targets(token_batch, schedule)
    total: Tensor | None = None
    for s, t, wk in zip(slices, targets, w):
        if wk == 0.0:
            continue
        term = softmax_cross_entropy(s, t) * wk
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.asarray(0.0))
    return total


def prior_distill_loss(
    teacher: VarModel,
    student: VarModel,
    codebook,
    class_prompt,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
) -> Tensor:
    """KL from the frozen teacher to the student on a teacher trajectory.

    The teacher samples token maps from the class prompt (tokens only; no
    pixel decode), then both models score that trajectory teacher-forced.
    Per scale, the position-mean KL(teacher ‖ student) is accumulated; the
    teacher pass runs untaped, so no gradient can reach its parameters.
    Identical models give exactly 0.
    """
    if teacher.cfg.schedule.extents != student.cfg.schedule.extents:
        raise ContractError("teacher and student schedules differ")
    if teacher.vocab.tokens != student.vocab.tokens:
        raise ContractError("teacher and student vocabularies differ")
    sampler = sampler or SamplerConfig(cfg_scale=1.0)
    ids = (
        teacher.vocab.encode(class_prompt, teacher.cfg.prompt_length)
        if isinstance(class_prompt, str)
        else np.asarray(class_prompt, dtype=np.int64)
    )
    cb = _codebook_array(codebook)
    trajectory = sample(teacher, ids, cb, replace(sampler, seed=seed))
    sched = teacher.cfg.schedule
    rows = flatten_scale_inputs(build_scale_inputs(trajectory, cb, sched))
    with suspend_taping():
        teacher_out = forward_sequence(teacher, rows, ids).data[0]
    student_slices = scale_slices(forward_sequence(student, rows, ids), sched, 1)
    total: Tensor | None = None
    for k, s_rows in enumerate(student_slices):
        start = prefix_positions(sched, k)
        t_rows = teacher_out[start : start + s_rows.shape[0]]
        term = kl_divergence(t_rows, s_rows)
        total = term if total is None else total + term
    return total


def build_class_token_bank(
    model: VarModel,
    class_prompt,
    codebook,
    size: int,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
) -> list[MultiScaleTokens]:
    """Pre-sample ``size`` class trajectories for replay-style preservation."""
    if size < 1:
        raise ContractError("token bank must hold at least one entry")
    sampler = sampler or SamplerConfig(cfg_scale=1.0)
    return [
        sample(model, class_prompt, codebook, replace(sampler, seed=seed + i))
        for i in range(size)
    ]


def prior_preservation_loss(
    model: VarModel,
    bank: list[MultiScaleTokens],
    codebook,
    class_prompt,
    pick: int = 0,
) -> Tensor:
    """Unit-weight CE of the model on one pre-generated class trajectory."""
    if not bank:
        raise ContractError("empty class token bank")
    tokens = bank[pick % len(bank)]
    ids = (
        model.vocab.encode(class_prompt, model.cfg.prompt_length)
        if isinstance(class_prompt, str)
        else np.asarray(class_prompt, dtype=np.int64)
    )
    cb = _codebook_array(codebook)
    rows = flatten_scale_inputs(build_scale_inputs(tokens, cb, model.cfg.schedule))
    logits = forward_sequence(model, rows, ids)
    ones = (1.0,) * model.cfg.schedule.K
    return _weighted_sequence_ce(logits, [tokens], model.cfg.schedule, ones)


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------


class LoraAdapters:
    """Low-rank deltas W + B·A over selected matrix parameters.

    ``down`` (B) is zero at construction and ``up`` (A) is random, so the
    adapted model's forward pass is bit-identical to the base until the
    first optimizer step.  Only the adapter factors train; the base tensors
    are handed to the forward pass as constants.
    """

    __slots__ = ("base", "rank", "names", "down", "up")

    def __init__(self, base: VarModel, rank: int, roles=LORA_ROLES, seed: int = 0):
        if rank < 1:
            raise ContractError("adapter rank must be a positive integer")
        unknown = set(roles) - set(LORA_ROLES)
        if unknown:
            raise ContractError(f"roles without adapter support: {sorted(unknown)}")
        self.base = base
        self.rank = int(rank)
        rng = np.random.default_rng(seed)
        self.names = [
            n
            for n in base.param_names()
            if base.roles[n] in roles and base.params[n].ndim == 2
        ]
        self.down: dict[str, Tensor] = {}
        self.up: dict[str, Tensor] = {}
        for n in self.names:
            d_in, d_out = base.params[n].shape
            self.down[n] = Tensor(np.zeros((d_in, self.rank)), requires_grad=True)
            self.up[n] = Tensor(
                rng.normal(0.0, 0.02, (self.rank, d_out)), requires_grad=True
            )

    def adapter_parameter_count(self) -> int:
        return sum(
            self.rank * (self.base.params[n].shape[0] + self.base.params[n].shape[1])
            for n in self.names
        )

    def trainable_parameters(self) -> list[Tensor]:
        out = []
        for n in self.names:
            out.append(self.down[n])
            out.append(self.up[n])
        return out

    def materialize(self) -> VarModel:
        """Forward-ready view: adapted tensors are taped base-plus-delta."""
        params: dict[str, Tensor] = {}
        for name, p in self.base.params.items():
            const = Tensor(p.data)
            if name in self.down:
                params[name] = add(const, matmul(self.down[name], self.up[name]))
            else:
                params[name] = const
        return VarModel(self.base.cfg, self.base.vocab, params, dict(self.base.roles))

    def collapse(self) -> VarModel:
        """Bake the deltas into a plain parameter set."""
        out = self.base.copy()
        for n in self.names:
            out.params[n].data += self.down[n].data @ self.up[n].data
        return out


def attach_lora(model: VarModel, rank: int, roles=LORA_ROLES, seed: int = 0) -> LoraAdapters:
    return LoraAdapters(model, rank, roles, seed)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectSet:
    """A few images of one subject plus its two prompts.

    ``c_sub`` must mention the dedicated subject token; ``c_cls`` must not
    (it is the plain class prompt the preservation machinery conditions
    on).  The class noun is read from the end of ``c_cls``.
    """

    images: tuple
    c_sub: str
    c_cls: str

    def __post_init__(self):
        if len(self.images) < 1:
            raise ContractError("a subject needs at least one image")
        if SUBJECT_TOKEN not in self.c_sub.split():
            raise ContractError("subject prompt must contain the subject token")
        if SUBJECT_TOKEN in self.c_cls.split():
            raise ContractError("class prompt must not contain the subject token")


def subject_set_from_corpus(dataset) -> SubjectSet:
    """The held-out subject of a synthetic corpus as a SubjectSet."""
    cls = dataset.spec.subject_class
    return SubjectSet(
        images=tuple(dataset.subject_images),
        c_sub=f"{SUBJECT_TOKEN} {cls}",
        c_cls=f"a {cls}",
    )


@dataclass(frozen=True)
class FinetuneConfig:
    """Recipe for subject fine-tuning.

    ``weights`` follows the coarse-heavy rule: unit weight on coarse scales
    and 0.5 on the finest two of the five-scale default.  ``variant``
    selects the prior-preservation term: "distill" scores fresh teacher
    trajectories with per-scale KL, "ppl" replays a fixed bank of class
    trajectories with plain CE, "none" trains on the subject alone.
    ``lora_rank`` switches the parameterization from masked fine-tuning to
    low-rank adapters (plus the subject embedding row).
    """

    weights: tuple[float, ...] = (1.0, 1.0, 1.0, 0.5, 0.5)
    distill_coeff: float = 1.0
    variant: str = "distill"
    steps: int = 200
    lr: float = 6e-3
    batch_size: int = 4
    augment: bool = True
    seed: int = 0
    roles: tuple[str, ...] = DEFAULT_TRAINABLE
    teacher_sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(cfg_scale=1.0)
    )
    ppl_bank: int = 16
    lora_rank: int | None = None

    def __post_init__(self):
        w = self.weights
        if not w or not all(np.isfinite(x) and x > 0.0 for x in w):
            raise ConfigError("scale weights must be finite and positive")
        if any(a < b for a, b in zip(w, w[1:])):
            raise ConfigError("scale weights must be non-increasing coarse to fine")
        if not np.isfinite(self.distill_coeff) or self.distill_coeff < 0.0:
            raise ConfigError("distill coefficient must be finite and >= 0")
        if self.variant not in ("none", "distill", "ppl"):
            raise ConfigError(f"unknown fine-tuning variant: {self.variant!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not np.isfinite(self.lr) or self.lr <= 0.0:
            raise ConfigError("learning rate must be finite and positive")
        if self.ppl_bank < 1:
            raise ConfigError("ppl bank size must be positive")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ConfigError("lora_rank must be a positive integer when set")


def _class_noun_id(ids_cls: np.ndarray) -> int | None:
    nonnull = ids_cls[ids_cls != 0]
    return int(nonnull[-1]) if nonnull.size else None


def finetune(
    orig: VarModel,
    subjects: SubjectSet,
    tokenizer_weights: AutoencoderWeights,
    config: FinetuneConfig | None = None,
):
    """Adapt a pretrained prior to a subject; returns (tuned, reference, rows).

    ``reference`` is an untouched copy of ``orig`` for later analysis.  Each
    step draws a batch of subject images (optionally augmented and therefore
    re-tokenized), scores them with the scale-weighted CE under the subject
    prompt, adds the configured preservation term, and updates only the
    parameters the mask (or the adapters) expose.  A final sweep asserts
    every frozen tensor is bit-identical to the reference.
    """
    config = config or FinetuneConfig()
    cfg = orig.cfg
    sched = cfg.schedule
    if len(config.weights) != sched.K:
        raise ContractError("one scale weight per schedule entry required")
    cb = tokenizer_weights.codebook
    if cb.shape != (cfg.vocab, cfg.channels):
        raise ContractError("tokenizer codebook does not match the model config")
    ids_sub = orig.vocab.encode(subjects.c_sub, cfg.prompt_length)
    ids_cls = orig.vocab.encode(subjects.c_cls, cfg.prompt_length)

    student = orig.copy()
    reference = orig.copy()

    adapters: LoraAdapters | None = None
    if config.lora_rank is not None:
        adapters = attach_lora(student, config.lora_rank, seed=config.seed)
        params = adapters.trainable_parameters()
        masks: list[np.ndarray | None] = [None] * len(params)
        row_mask = np.zeros(student.params["text.prompt"].shape, dtype=bool)
        row_mask[student.vocab.subject_index] = True
        params.append(student.params["text.prompt"])
        masks.append(row_mask)
        frozen = [n for n in student.param_names() if n != "text.prompt"]
        subject_row_free = True
    else:
        mask = select_trainable(student, config.roles)
        params, masks = mask.optimizer_views(student)
        frozen = mask.frozen_names()
        flag = mask.flags["text.prompt"]
        subject_row_free = bool(
            flag[student.vocab.subject_index].any()
            if isinstance(flag, np.ndarray)
            else flag
        )

    # give the fresh subject row a semantically sensible start; a frozen
    # row must stay bit-identical to the original, so skip it there
    noun = _class_noun_id(ids_cls)
    if noun is not None and subject_row_free:
        table = student.params["text.prompt"].data
        table[student.vocab.subject_index] = table[noun]

    bank: list[MultiScaleTokens] = []
    if config.variant == "ppl":
        bank = build_class_token_bank(
            reference, ids_cls, cb, config.ppl_bank, config.teacher_sampler,
            seed=config.seed,
        )

    cached_tokens = None
    if not config.augment:
        cached_tokens = [tokenize_image(img, tokenizer_weights) for img in subjects.images]

    rng = np.random.default_rng(config.seed)
    state = AdamWState(lr=config.lr)
    rows_out: list[dict] = []
    for step in range(1, config.steps + 1):
        batch = rng.integers(0, len(subjects.images), size=config.batch_size)
        token_batch: list[MultiScaleTokens] = []
        for i in batch:
            if cached_tokens is not None:
                token_batch.append(cached_tokens[i])
            else:
                img = augment(subjects.images[i], seed=int(rng.integers(2**31)))
                token_batch.append(tokenize_image(img, tokenizer_weights))
        row_batch = np.stack(
            [
                flatten_scale_inputs(build_scale_inputs(t, cb, sched))
                for t in token_batch
            ]
        )
        distill_seed = int(rng.integers(2**31))
        ppl_pick = int(rng.integers(2**31))

        zero_grad(params)
        with Tape() as tape:
            live = adapters.materialize() if adapters is not None else student
            logits = forward_sequence(live, row_batch, ids_sub)
            loss_wce = _weighted_sequence_ce(logits, token_batch, sched, config.weights)
            if config.variant == "distill":
                prior = prior_distill_loss(
                    reference, live, cb, ids_cls, config.teacher_sampler, distill_seed
                )
                total = loss_wce + prior * config.distill_coeff
            elif config.variant == "ppl":
                prior = prior_preservation_loss(live, bank, cb, ids_cls, ppl_pick)
                total = loss_wce + prior * config.distill_coeff
            else:
                prior = Tensor(np.asarray(0.0))
                total = loss_wce
            if not np.isfinite(total.item()):
                raise NumericError(f"fine-tuning loss diverged at step {step}")
            backward(total, tape)
        adamw_step(params, state=state, masks=masks)
        rows_out.append(
            {
                "step": step,
                "loss_wce": loss_wce.item(),
                "loss_distill": prior.item(),
                "loss_total": total.item(),
                "lr": config.lr,
            }
        )

    tuned = adapters.collapse() if adapters is not None else student
    for name in frozen:
        if not np.array_equal(student.params[name].data, reference.params[name].data):
            raise AssertionError(f"frozen parameter mutated: {name}")
    if "text.prompt" not in frozen:
        tbl_s = student.params["text.prompt"].data
        tbl_r = reference.params["text.prompt"].data
        free = np.zeros(tbl_s.shape[0], dtype=bool)
        free[student.vocab.subject_index] = True
        trainable_table = (
            adapters is None
            and isinstance(mask.flags.get("text.prompt"), bool)
            and mask.flags["text.prompt"]
        )
        if not trainable_table and not np.array_equal(tbl_s[~free], tbl_r[~free]):
            raise AssertionError("frozen prompt rows mutated")
    return tuned, reference, rows_out
