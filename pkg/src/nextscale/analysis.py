"""Diagnostics and evaluation for personalization runs.

Three instruments: per-layer weight-change ratios (which roles a fine-tune
actually moved), scale-corruption curves (how much image content each token
scale carries, probed by splicing clean and noise token maps), and an
embedding-space metric suite (subject fidelity, prior drift, sample
diversity).  The embedder is the tokenizer encoder's spatially pooled
feature vector; it is validated for class separability by the test suite
before any metric built on it is trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, NumericError
from .model import SamplerConfig, VarModel, sample
from .personalize import SubjectSet
from .tokenizer import (
    AutoencoderWeights,
    MultiScaleTokens,
    decode_feature,
    dequantize,
    detokenize_image,
    encode_image,
    quantize_multiscale,
)

__all__ = [
    "WeightDiffReport",
    "CorruptionCurve",
    "EvalReport",
    "weight_diff_ratio",
    "corruption_decodes",
    "scale_corruption_curve",
    "mean_corruption_curve",
    "embed_for_eval",
    "make_embedder",
    "pres_metric",
    "div_metric",
    "subject_fidelity",
    "evaluate_personalization",
    "weight_report_rows",
    "curve_rows",
    "eval_report_rows",
]


# ---------------------------------------------------------------------------
# weight-change ratios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDiffReport:
    """Elementwise relative weight change, grouped two ways.

    ``per_group`` holds one (block, role, ratio) triple per parameter group,
    where the ratio is the mean over the group's elements of
    |orig - tuned| / (|orig| + eps).  ``per_role`` pools every element of a
    role across blocks.  Parameters outside the transformer blocks group
    under the block label "global".
    """

    per_group: tuple[tuple[str, str, float], ...]
    per_role: tuple[tuple[str, float], ...]
    eps: float

    def group_ratio(self, block: str, role: str) -> float:
        for b, r, v in self.per_group:
            if b == block and r == role:
                return v
        raise KeyError((block, role))

    def role_ratio(self, role: str) -> float:
        for r, v in self.per_role:
            if r == role:
                return v
        raise KeyError(role)


def _block_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return head if head.startswith("block") else "global"


def weight_diff_ratio(
    orig: VarModel, tuned: VarModel, eps: float = 1e-8
) -> WeightDiffReport:
    """Mean elementwise |orig - tuned| / (|orig| + eps) per (block, role).

    Identical models report exactly 0 everywhere; a selectively fine-tuned
    model reports exactly 0 on its frozen roles, which ties this instrument
    to the optimizer-side freeze guarantee.
    """
    if orig.param_names() != tuned.param_names():
        raise ContractError("models expose different parameter sets")
    if orig.roles != tuned.roles:
        raise ContractError("models disagree on parameter roles")
    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    role_sums: dict[str, float] = {}
    role_counts: dict[str, int] = {}
    for name in orig.param_names():
        a = orig.params[name].data
        b = tuned.params[name].data
        if a.shape != b.shape:
            raise ContractError(f"shape mismatch on {name}")
        ratio = np.abs(a - b) / (np.abs(a) + eps)
        key = (_block_of(name), orig.roles[name])
        sums[key] = sums.get(key, 0.0) + float(ratio.sum())
        counts[key] = counts.get(key, 0) + ratio.size
        role = key[1]
        role_sums[role] = role_sums.get(role, 0.0) + float(ratio.sum())
        role_counts[role] = role_counts.get(role, 0) + ratio.size
    per_group = tuple(
        (b, r, sums[(b, r)] / counts[(b, r)]) for b, r in sorted(sums)
    )
    per_role = tuple((r, role_sums[r] / role_counts[r]) for r in sorted(role_sums))
    return WeightDiffReport(per_group=per_group, per_role=per_role, eps=float(eps))


# ---------------------------------------------------------------------------
# scale-corruption curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionCurve:
    """Pixel MSE against the reference image per clean-prefix length.

    Entry k decodes the first k token maps of the clean image followed by
    the remaining maps of a noise image's encoding; k=0 is the all-noise
    decode and k=K the clean reconstruction.
    """

    boundaries: tuple[int, ...]
    mse: tuple[float, ...]
    noise_seed: int

    def __post_init__(self):
        if len(self.boundaries) != len(self.mse):
            raise ContractError("one MSE per boundary required")
        if any(m < 0.0 for m in self.mse):
            raise ContractError("MSE cannot be negative")


def corruption_decodes(
    weights: AutoencoderWeights,
    image: np.ndarray,
    noise_seed: int = 0,
    schedule=None,
) -> list[np.ndarray]:
    """Decoded images per boundary k: clean-prefix / noise-suffix splices.

    The noise image is i.i.d. uniform [0, 1] pixels drawn from noise_seed.
    Both images are tokenized independently; boundary k keeps the first k
    clean maps and fills the rest from the noise encoding.
    """
    sched = schedule if schedule is not None else weights.cfg.schedule
    img = np.asarray(image, dtype=np.float64)
    noise = np.random.default_rng(noise_seed).random(img.shape)
    clean = quantize_multiscale(encode_image(img, weights), weights.codebook, sched)
    noisy = quantize_multiscale(encode_image(noise, weights), weights.codebook, sched)
    decodes = []
    for k in range(sched.K + 1):
        tokens = MultiScaleTokens(clean.maps[:k] + noisy.maps[k:])
        feature = dequantize(tokens, weights.codebook, sched)
        decodes.append(decode_feature(feature, weights))
    return decodes


def scale_corruption_curve(
    weights: AutoencoderWeights,
    image: np.ndarray,
    noise_seed: int = 0,
    schedule=None,
) -> CorruptionCurve:
    """Pixel MSE of each clean-prefix / noise-suffix splice against the image."""
    img = np.asarray(image, dtype=np.float64)
    decodes = corruption_decodes(weights, img, noise_seed, schedule)
    return CorruptionCurve(
        boundaries=tuple(range(len(decodes))),
        mse=tuple(float(np.mean((out - img) ** 2)) for out in decodes),
        noise_seed=int(noise_seed),
    )


def mean_corruption_curve(
    weights: AutoencoderWeights,
    images,
    noise_seed: int = 0,
    schedule=None,
) -> CorruptionCurve:
    """Average the per-image curves; image i uses noise seed noise_seed + i.

    Individual curves may wiggle; the corpus mean is the monotone object.
    """
    images = list(images)
    if not images:
        raise ContractError("need at least one image")
    acc: np.ndarray | None = None
    ks: tuple[int, ...] = ()
    for i, img in enumerate(images):
        curve = scale_corruption_curve(weights, img, noise_seed + i, schedule)
        ks = curve.boundaries
        acc = np.array(curve.mse) if acc is None else acc + np.array(curve.mse)
    return CorruptionCurve(
        boundaries=ks,
        mse=tuple(float(v) for v in acc / len(images)),
        noise_seed=int(noise_seed),
    )


# ---------------------------------------------------------------------------
# embedding metrics
# ---------------------------------------------------------------------------


def embed_for_eval(image: np.ndarray, weights: AutoencoderWeights) -> np.ndarray:
    """Spatial mean of the encoder feature map, L2-normalized."""
    feature = encode_image(np.asarray(image, dtype=np.float64), weights)
    v = feature.mean(axis=(0, 1))
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise NumericError("degenerate all-zero feature embedding")
    return v / n


def make_embedder(weights: AutoencoderWeights):
    """Close over the weights: image -> unit embedding vector."""
    return lambda image: embed_for_eval(image, weights)


def _embed_set(images, embed) -> np.ndarray:
    return np.stack([np.asarray(embed(im), dtype=np.float64) for im in images])


def _cross_mean_cosine(set_a, set_b, embed) -> float:
    a = _embed_set(set_a, embed)
    b = _embed_set(set_b, embed)
    return float(np.mean(np.clip(a @ b.T, -1.0, 1.0)))


def pres_metric(class_samples, subject_images, embed) -> float:
    """Mean cross-pair cosine between class generations and real subject images.

    Higher means the model's class prompt has drifted toward the subject
    (prior erosion); a preserved prior keeps this low.
    """
    if not len(class_samples) or not len(subject_images):
        raise ContractError("both image sets must be nonempty")
    return _cross_mean_cosine(class_samples, subject_images, embed)


def div_metric(images, embed) -> float:
    """Mean pairwise (1 - cosine) within one prompt's generations."""
    images = list(images)
    if len(images) < 2:
        raise ContractError("diversity needs at least two images")
    e = _embed_set(images, embed)
    gram = np.clip(e @ e.T, -1.0, 1.0)
    iu = np.triu_indices(len(images), k=1)
    return float(np.mean(1.0 - gram[iu]))


def subject_fidelity(generated, references, embed) -> float:
    """Mean cross-pair cosine between generations and reference images."""
    if not len(generated) or not len(references):
        raise ContractError("both image sets must be nonempty")
    return _cross_mean_cosine(generated, references, embed)


# ---------------------------------------------------------------------------
# personalization evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Embedding-space summary of one personalized model.

    ``per_prompt`` carries (prompt, fidelity, diversity) for each evaluated
    subject prompt; the headline numbers come from the bare subject prompt
    and the bare class prompt.
    """

    subject_fidelity: float
    pres: float
    div: float
    per_prompt: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        for v in (self.subject_fidelity, self.pres):
            if not -1.0 <= v <= 1.0:
                raise ContractError("cosine metrics must lie in [-1, 1]")
        if self.div < 0.0:
            raise ContractError("diversity cannot be negative")


def _generate(model, prompt, weights, count, sampler, seed0) -> list[np.ndarray]:
    return [
        detokenize_image(
            sample(model, prompt, weights.codebook, replace(sampler, seed=seed0 + i)),
            weights,
        )
        for i in range(count)
    ]


def evaluate_personalization(
    model: VarModel,
    subjects: SubjectSet,
    weights: AutoencoderWeights,
    n_subject_samples: int = 8,
    n_class_samples: int = 16,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    prompts=None,
) -> EvalReport:
    """Sample the model and score it against the subject's reference images.

    Fidelity and diversity come from ``n_subject_samples`` generations under
    the subject prompt; drift (pres) compares ``n_class_samples`` class
    prompt generations against the real subject images.  Extra ``prompts``
    get their own (fidelity, diversity) breakdown rows.
    """
    if n_subject_samples < 2 or n_class_samples < 1:
        raise ContractError("need >= 2 subject samples and >= 1 class sample")
    sampler = sampler or SamplerConfig(cfg_scale=2.0, temperature=0.8)
    embed = make_embedder(weights)
    gen_subject = _generate(
        model, subjects.c_sub, weights, n_subject_samples, sampler, seed
    )
    gen_class = _generate(
        model, subjects.c_cls, weights, n_class_samples, sampler, seed + 10_000
    )
    rows = [
        (
            subjects.c_sub,
            subject_fidelity(gen_subject, subjects.images, embed),
            div_metric(gen_subject, embed),
        )
    ]
    for j, prompt in enumerate(prompts or ()):
        extra = _generate(
            model, prompt, weights, n_subject_samples, sampler, seed + 20_000 + j
        )
        rows.append(
            (
                prompt,
                subject_fidelity(extra, subjects.images, embed),
                div_metric(extra, embed),
            )
        )
    return EvalReport(
        subject_fidelity=rows[0][1],
        pres=pres_metric(gen_class, subjects.images, embed),
        div=rows[0][2],
        per_prompt=tuple(rows),
    )


# ---------------------------------------------------------------------------
# CSV row helpers
# ---------------------------------------------------------------------------


def weight_report_rows(report: WeightDiffReport) -> list[dict]:
    """Group rows first, then per-role aggregates under block "all"."""
    rows = [
        {"block": b, "role": r, "ratio": v} for b, r, v in report.per_group
    ]
    rows += [{"block": "all", "role": r, "ratio": v} for r, v in report.per_role]
    return rows


def curve_rows(curve: CorruptionCurve) -> list[dict]:
    return [
        {"k": k, "mse": m} for k, m in zip(curve.boundaries, curve.mse)
    ]


def eval_report_rows(report: EvalReport, subject: str) -> list[dict]:
    rows = [
        {"metric": "fidelity", "value": report.subject_fidelity, "subject": subject, "prompt": report.per_prompt[0][0]},
        {"metric": "pres", "value": report.pres, "subject": subject, "prompt": ""},
        {"metric": "div", "value": report.div, "subject": subject, "prompt": report.per_prompt[0][0]},
    ]
    for prompt, fid, div in report.per_prompt[1:]:
        rows.append({"metric": "fidelity", "value": fid, "subject": subject, "prompt": prompt})
        rows.append({"metric": "div", "value": div, "subject": subject, "prompt": prompt})
    return rows
