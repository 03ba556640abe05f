"""Command-line stages: train, personalize, sample, analyze, evaluate.

Every stage is a pure function of (config JSON, --seed, input checkpoints)
and writes deterministic artifacts under --out: VARP checkpoints, P6 PPM
images, CSV tables, and JSON sidecars.  Exit codes: 0 success, 2 malformed
config or unusable inputs, 3 numeric abort, 1 selfcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .analysis import (
    corruption_decodes,
    curve_rows,
    eval_report_rows,
    evaluate_personalization,
    mean_corruption_curve,
    weight_diff_ratio,
    weight_report_rows,
)
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .model import (
    PromptVocab,
    VarModel,
    build_scale_inputs,
    flatten_scale_inputs,
    forward_sequence,
    guided_logits,
    pretrain,
    sample_trace,
)
from .optim import AdamWState, adamw_step, finite_diff_check
from .personalize import (
    _weighted_sequence_ce,
    finetune,
    subject_set_from_corpus,
)
from .ppm import write_ppm
from .synthetic import generate_synthetic_dataset
from .tokenizer import (
    AutoencoderWeights,
    MultiScaleTokens,
    ScaleSchedule,
    detokenize_image,
    dequantize,
    quantize_multiscale,
    token_rows,
    train_autoencoder,
)


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", encoding="ascii", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_tokenizer(path) -> AutoencoderWeights:
    obj = load_checkpoint(path)
    if not isinstance(obj, AutoencoderWeights):
        raise ConfigError(f"{path}: not a tokenizer checkpoint")
    return obj


def _load_model(path) -> VarModel:
    obj = load_checkpoint(path)
    if not isinstance(obj, VarModel):
        raise ConfigError(f"{path}: not a model checkpoint")
    return obj


def _corpus(run: RunConfig):
    return generate_synthetic_dataset(
        run.section("corpus"), seed=run.sections["corpus_seed"]
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_pretrain_tokenizer(run: RunConfig) -> int:
    dataset = _corpus(run)
    weights, rows = train_autoencoder(
        dataset.images(),
        run.section("autoencoder"),
        run.section("tokenizer"),
        seed=run.seed,
    )
    save_checkpoint(os.path.join(run.out, "tokenizer.varp"), weights)
    _write_csv(
        os.path.join(run.out, "tokenizer_train.csv"),
        rows,
        ("step", "loss", "recon", "codebook", "commit"),
    )
    print(f"tokenizer: {len(rows)} steps, final recon {rows[-1]['recon']:.6f}")
    return 0


def _stage_pretrain_var(run: RunConfig) -> int:
    weights = _load_tokenizer(run.inputs["tokenizer"])
    dataset = _corpus(run)
    spec = dataset.spec
    vocab = PromptVocab.build(spec.classes, spec.backgrounds.keys())
    cfg = run.section("model")
    if cfg.prompt_vocab != vocab.size:
        raise ConfigError(
            f"model.prompt_vocab is {cfg.prompt_vocab} but the corpus "
            f"vocabulary holds {vocab.size} tokens"
        )
    if (cfg.vocab, cfg.channels) != (weights.cfg.vocab, weights.cfg.channels):
        raise ConfigError("model vocab/channels do not match the tokenizer")
    if cfg.schedule.extents != weights.cfg.schedule.extents:
        raise ConfigError("model schedule does not match the tokenizer")
    model = VarModel.initialize(cfg, vocab, seed=run.seed)
    rows = pretrain(model, dataset.examples, weights, run.section("pretrain"), seed=run.seed)
    save_checkpoint(os.path.join(run.out, "prior.varp"), model)
    columns = ("step", "loss") + tuple(
        f"ce_scale_{k + 1}" for k in range(cfg.schedule.K)
    )
    _write_csv(os.path.join(run.out, "pretrain_train.csv"), rows, columns)
    print(f"prior: {len(rows)} steps, final loss {rows[-1]['loss']:.4f}")
    return 0


def _stage_finetune(run: RunConfig) -> int:
    weights = _load_tokenizer(run.inputs["tokenizer"])
    prior = _load_model(run.inputs["model"])
    subjects = subject_set_from_corpus(_corpus(run))
    cfg = replace(run.section("finetune"), seed=run.seed)
    tuned, _, rows = finetune(prior, subjects, weights, cfg)
    save_checkpoint(os.path.join(run.out, "tuned.varp"), tuned)
    _write_csv(
        os.path.join(run.out, "finetune_train.csv"),
        rows,
        ("step", "loss_wce", "loss_distill", "loss_total", "lr"),
    )
    print(f"tuned: {len(rows)} steps, final total {rows[-1]['loss_total']:.4f}")
    return 0


def _stage_sample(run: RunConfig) -> int:
    weights = _load_tokenizer(run.inputs["tokenizer"])
    model = _load_model(run.inputs["model"])
    sampler = run.section("sampler")
    params = run.section("sample")
    for i in range(params.count):
        cfg = replace(sampler, seed=run.seed + i)
        tokens, trace = sample_trace(model, params.prompt, weights.codebook, cfg)
        write_ppm(
            os.path.join(run.out, f"sample_{i:03d}.ppm"),
            detokenize_image(tokens, weights),
        )
        _write_json(
            os.path.join(run.out, f"sample_{i:03d}.json"),
            {
                "prompt": params.prompt,
                "seed": cfg.seed,
                "cfg_scale": cfg.cfg_scale,
                "temperature": cfg.temperature,
                "top_k": cfg.top_k,
                "per_scale_entropy": trace["per_scale_entropy"],
            },
        )
        _write_csv(
            os.path.join(run.out, f"sample_{i:03d}.tokens.csv"),
            [
                {"k": k, "row": r, "col": c, "token": t}
                for k, r, c, t in token_rows(tokens)
            ],
            ("k", "row", "col", "token"),
        )
    print(f"samples: {params.count} under prompt {params.prompt!r}")
    return 0


def _stage_analyze_weights(run: RunConfig) -> int:
    orig = _load_model(run.inputs["original"])
    tuned = _load_model(run.inputs["tuned"])
    report = weight_diff_ratio(orig, tuned, eps=run.section("analyze").eps)
    _write_csv(
        os.path.join(run.out, "weight_report.csv"),
        weight_report_rows(report),
        ("block", "role", "ratio"),
    )
    moved = [r for r, v in report.per_role if v > 0.0]
    print(f"weight report: roles moved = {moved or ['none']}")
    return 0


def _stage_analyze_scales(run: RunConfig) -> int:
    weights = _load_tokenizer(run.inputs["tokenizer"])
    params = run.section("scales")
    dataset = _corpus(run)
    images = [e.image for e in dataset.examples[: params.images]]
    curve = mean_corruption_curve(weights, images, noise_seed=params.noise_seed)
    _write_csv(os.path.join(run.out, "corruption.csv"), curve_rows(curve), ("k", "mse"))
    for i in range(min(params.dumps, len(images))):
        decodes = corruption_decodes(weights, images[i], params.noise_seed + i)
        for k, img in enumerate(decodes):
            write_ppm(os.path.join(run.out, f"corrupt_img{i}_k{k}.ppm"), img)
    print(f"corruption: mean over {len(images)} images = "
          + " ".join(f"{m:.4f}" for m in curve.mse))
    return 0


def _stage_evaluate(run: RunConfig) -> int:
    weights = _load_tokenizer(run.inputs["tokenizer"])
    model = _load_model(run.inputs["model"])
    subjects = subject_set_from_corpus(_corpus(run))
    params = run.section("eval")
    report = evaluate_personalization(
        model,
        subjects,
        weights,
        n_subject_samples=params.subject_samples,
        n_class_samples=params.class_samples,
        sampler=run.section("sampler"),
        seed=run.seed,
        prompts=params.prompts,
    )
    _write_csv(
        os.path.join(run.out, "eval_report.csv"),
        eval_report_rows(report, subject=subjects.c_sub),
        ("metric", "value", "subject", "prompt"),
    )
    print(
        f"eval: fidelity {report.subject_fidelity:.4f} "
        f"pres {report.pres:.4f} div {report.div:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------


def _micro_setup(seed: int):
    schedule = ScaleSchedule(((1, 1), (2, 2)))
    vocab = PromptVocab(("<null>", "<S*>", "a", "on", "x"))
    cfg = dict(
        width=16, blocks=2, heads=2, head_dim=8, ffn_hidden=32,
        vocab=7, channels=3, prompt_vocab=vocab.size, prompt_length=3,
    )
    from .model import VarConfig

    model = VarModel.initialize(VarConfig(schedule=schedule, **cfg), vocab, seed=seed)
    rng = np.random.default_rng(seed)
    codebook = rng.normal(0.0, 1.0, (7, 3))
    tokens = MultiScaleTokens(
        [rng.integers(0, 7, (h, w)) for h, w in schedule.extents]
    )
    return model, codebook, tokens


def _check_gradients(seed: int) -> float:
    model, codebook, tokens = _micro_setup(seed)
    ids = model.vocab.encode("a x", length=3)
    rows = flatten_scale_inputs(build_scale_inputs(tokens, codebook, model.cfg.schedule))

    def loss_fn():
        logits = forward_sequence(model, rows, ids)
        return _weighted_sequence_ce(
            logits, [tokens], model.cfg.schedule, (1.0, 0.5)
        )

    probe = [
        model.params[n]
        for n in (
            "block0.sa.wq", "block1.ca.wk", "block0.ffn.w1",
            "text.prompt", "head.w", "embed.pos",
        )
    ]
    return finite_diff_check(loss_fn, probe, coords_per_param=4, seed=seed)


def _check_telescoping(seed: int) -> float:
    rng = np.random.default_rng(seed)
    schedule = ScaleSchedule(((1, 1), (2, 2), (4, 4)))
    codebook = np.vstack([np.zeros((1, 3)), rng.normal(0.0, 1.0, (15, 3))])
    worst = 0.0
    for _ in range(5):
        feature = rng.normal(0.0, 1.0, (4, 4, 3))
        tokens = quantize_multiscale(feature, codebook, schedule)
        prev = None
        for k in range(1, schedule.K + 1):
            part = dequantize(tokens, codebook, schedule, scales=k)
            mse = float(np.mean((part - feature) ** 2))
            if prev is not None and mse > prev + 1e-12:
                worst = max(worst, mse - prev)
            prev = mse
    return worst


def _check_cfg_identities(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cond = rng.normal(0.0, 2.0, (4, 7))
    null = rng.normal(0.0, 2.0, (4, 7))
    a = np.array_equal(guided_logits(cond, null, 1.0), cond)
    b = np.array_equal(guided_logits(cond, null, 0.0), null)
    return 0.0 if (a and b) else 1.0


def _check_mask_freeze(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = Tensor(rng.normal(0.0, 1.0, (4, 3)), requires_grad=True)
    before = p.data.copy()
    p.grad = rng.normal(0.0, 1.0, (4, 3))
    mask = np.zeros((4, 3), dtype=bool)
    mask[1] = True
    adamw_step([p], state=AdamWState(lr=0.1), masks=[mask])
    frozen_ok = np.array_equal(p.data[~mask], before[~mask])
    moved = not np.array_equal(p.data[1], before[1])
    return 0.0 if (frozen_ok and moved) else 1.0


def _check_checkpoint_roundtrip(seed: int, out: str | None) -> float:
    import tempfile

    model, _, _ = _micro_setup(seed)
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        path = os.path.join(tmp, "micro.varp")
        save_checkpoint(path, model)
        back = load_checkpoint(path)
    same = all(
        np.array_equal(model.params[n].data, back.params[n].data)
        for n in model.param_names()
    )
    return 0.0 if same else 1.0


def _stage_selfcheck(run: RunConfig) -> int:
    checks = (
        ("gradient agreement (max rel err, tol 1e-4)",
         lambda: _check_gradients(run.seed), 1e-4),
        ("residual telescoping (worst MSE rise, tol 0)",
         lambda: _check_telescoping(run.seed), 0.0),
        ("guidance endpoint identities",
         lambda: _check_cfg_identities(run.seed), 0.0),
        ("masked optimizer freeze",
         lambda: _check_mask_freeze(run.seed), 0.0),
        ("checkpoint round-trip",
         lambda: _check_checkpoint_roundtrip(run.seed, run.out), 0.0),
    )
    failures = 0
    for name, fn, tol in checks:
        try:
            value = fn()
            ok = value <= tol
        except Exception as e:  # a crash is a failure, not an abort
            value, ok = float("nan"), False
            print(f"selfcheck {name}: EXCEPTION {type(e).__name__}: {e}")
        status = "ok" if ok else "FAILED"
        print(f"selfcheck {name}: {status} ({value:.3e})")
        failures += 0 if ok else 1
    return 1 if failures else 0


_STAGES = {
    "pretrain-tokenizer": _stage_pretrain_tokenizer,
    "pretrain-var": _stage_pretrain_var,
    "finetune": _stage_finetune,
    "sample": _stage_sample,
    "analyze-weights": _stage_analyze_weights,
    "analyze-scales": _stage_analyze_scales,
    "evaluate": _stage_evaluate,
    "selfcheck": _stage_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nextscale",
        description="Desk-scale next-scale image modeling workbench",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in _STAGES:
        s = sub.add_parser(stage)
        s.add_argument("--config", default=None, help="JSON run configuration")
        s.add_argument("--seed", type=int, default=None, help="master seed")
        if stage == "selfcheck":
            s.add_argument("--out", default=None, help=argparse.SUPPRESS)
        else:
            s.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = load_run_config(args.stage, args.config, args.seed, args.out)
        if run.out is not None:
            os.makedirs(run.out, exist_ok=True)
        return _STAGES[args.stage](run)
    except (ConfigError, CheckpointError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
