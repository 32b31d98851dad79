"""Command-line entry point: corpus synthesis, training, and evaluation.

Exit codes: 0 success, 1 usage, 2 data problem, 3 numeric failure. The
``METRICFORGE_THREADS`` environment variable caps worker parallelism
(evaluation embedding workers; a value above 1 also enables the training
feature prefetcher).

Training flags can also come from a config file of ``key=value`` lines
(``#`` starts a comment); keys match the long flag names with underscores.
Explicit flags override the file. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ContractError, DataError, NumericError, ShapeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

TRAIN_DEFAULTS = {
    "lambda_tri": 1.0,
    "lambda_npair": 0.5,
    "lambda_ang": 1.0,
    "lambda_soft": 0.1,
    "alpha_deg": 45.0,
    "margin": 0.3,
    "p": 8,
    "k": 2,
    "lr": 3e-4,
    "pretrain_epochs": 3,
    "epochs": 30,
    "seed": 0,
    "steps_per_epoch": None,
    "embedding_dim": 128,
    "spect_mode": "magnitude",
    "feature_norm": "per-bin",
}

_CONFIG_TYPES = {
    "lambda_tri": float, "lambda_npair": float, "lambda_ang": float, "lambda_soft": float,
    "alpha_deg": float, "margin": float, "lr": float,
    "p": int, "k": int, "pretrain_epochs": int, "epochs": int, "seed": int,
    "steps_per_epoch": int, "embedding_dim": int,
    "spect_mode": str, "feature_norm": str,
}


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metricforge",
                     description="Multi-loss speaker-embedding trainer and EER evaluator.")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,eval}")

    p_synth = sub.add_parser("synth",
                             help="generate a synthetic toy-speaker corpus with trials")
    p_synth.add_argument("--out", required=True, help="output corpus directory")
    p_synth.add_argument("--speakers", type=int, default=20, help="training speakers")
    p_synth.add_argument("--utts", type=int, default=20, help="utterances per speaker")
    p_synth.add_argument("--eval-speakers", type=int, default=8,
                         help="held-out speakers for trials (disjoint from training)")
    p_synth.add_argument("--eval-utts", type=int, default=10,
                         help="utterances per held-out speaker")
    p_synth.add_argument("--duration", type=float, default=4.0, help="seconds per utterance")
    p_synth.add_argument("--num-target", type=int, default=200, help="same-speaker trials")
    p_synth.add_argument("--num-nontarget", type=int, default=200,
                         help="cross-speaker trials")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train",
                             help="train on a manifest with the multi-loss objective")
    p_train.add_argument("--manifest", required=True,
                         help="speaker_id<TAB>wav_path manifest")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--config", help="key=value config file; flags override it")
    p_train.add_argument("--lambda-tri", type=float)
    p_train.add_argument("--lambda-npair", type=float)
    p_train.add_argument("--lambda-ang", type=float)
    p_train.add_argument("--lambda-soft", type=float)
    p_train.add_argument("--alpha-deg", type=float, help="angular threshold in degrees")
    p_train.add_argument("--margin", type=float, help="triplet margin")
    p_train.add_argument("--p", type=int, help="speakers per batch")
    p_train.add_argument("--k", type=int, help="crops per speaker")
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--pretrain-epochs", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--steps-per-epoch", type=int)
    p_train.add_argument("--embedding-dim", type=int)
    p_train.add_argument("--spect-mode", choices=("magnitude", "power", "log"))
    p_train.add_argument("--feature-norm", choices=("per-bin", "none"))
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval",
                            help="score trials and report EER with a DET curve")
    p_eval.add_argument("--checkpoint", help="checkpoint directory from training")
    p_eval.add_argument("--trials", help="label path_a path_b trial file")
    p_eval.add_argument("--out", help="directory for scores.csv / eer.json / det.csv+svg")
    p_eval.add_argument("--metric", choices=("cosine", "sqeuclidean"), default="cosine")
    p_eval.add_argument("--score-file",
                        help="passthrough mode: compute EER from an existing score CSV")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def _threads() -> int:
    raw = os.environ.get("METRICFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"METRICFORGE_THREADS must be an integer, got {raw!r}")


def _read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: config file not found")
    values = {}
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{p}:{ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_TYPES:
            raise ContractError(f"{p}:{ln}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_TYPES[key](value.strip())
        except ValueError:
            raise ContractError(f"{p}:{ln}: cannot parse {value.strip()!r} for {key}")
    return values


def _resolve_train_settings(args) -> dict:
    """Defaults, then config file, then explicit flags."""
    settings = dict(TRAIN_DEFAULTS)
    if args.config:
        settings.update(_read_config_file(args.config))
    for key in _CONFIG_TYPES:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            settings[key] = flag_val
    return settings


def cmd_synth(args) -> int:
    from .synth import gen_corpus, gen_trials

    if args.speakers < 2 or args.utts < 2:
        raise ContractError("--speakers and --utts must be >= 2")
    if args.eval_speakers < 2 or args.eval_utts < 2:
        raise ContractError("--eval-speakers and --eval-utts must be >= 2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_manifest = gen_corpus(out, args.speakers, args.utts, args.duration, args.seed,
                                manifest_name="train_manifest.tsv")
    eval_manifest = gen_corpus(out, args.eval_speakers, args.eval_utts, args.duration,
                               args.seed, manifest_name="eval_manifest.tsv",
                               id_offset=args.speakers)
    trials = gen_trials(eval_manifest, out / "trials.txt", args.num_target,
                        args.num_nontarget, args.seed)
    print(f"wrote {train_manifest}")
    print(f"wrote {eval_manifest}")
    print(f"wrote {trials}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .batching import Dataset
    from .losses import LossWeights
    from .model import ModelConfig
    from .trainer import TrainConfig, train

    s = _resolve_train_settings(args)
    weights = LossWeights(lambda_npair=s["lambda_npair"], lambda_soft=s["lambda_soft"],
                          lambda_tri=s["lambda_tri"], lambda_ang=s["lambda_ang"],
                          margin=s["margin"], alpha_deg=s["alpha_deg"])
    train_cfg = TrainConfig(p=s["p"], k=s["k"], lr=s["lr"],
                            pretrain_epochs=s["pretrain_epochs"], epochs=s["epochs"],
                            seed=s["seed"], weights=weights,
                            steps_per_epoch=s["steps_per_epoch"],
                            spect_mode=s["spect_mode"], feature_norm=s["feature_norm"],
                            prefetch=_threads() > 1)
    model_cfg = ModelConfig(embedding_dim=s["embedding_dim"])
    dataset = Dataset.from_manifest(args.manifest)
    result = train(dataset, model_cfg, train_cfg, args.out)
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def render_det_svg(points, width: int = 480, height: int = 480) -> str:
    """Self-contained DET plot (FAR vs FRR, axes in percent, linear scale)."""
    ml, mr, mt, mb = 62, 16, 16, 54
    pw, ph = width - ml - mr, height - mt - mb

    def x(far):
        return ml + pw * far

    def y(frr):
        return mt + ph * (1.0 - frr)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for frac in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        pct = f"{frac * 100:.0f}"
        parts.append(f'<line x1="{x(frac):.1f}" y1="{mt}" x2="{x(frac):.1f}" '
                     f'y2="{mt + ph}" stroke="#ddd"/>')
        parts.append(f'<line x1="{ml}" y1="{y(frac):.1f}" x2="{ml + pw}" '
                     f'y2="{y(frac):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{x(frac):.1f}" y="{mt + ph + 18}" font-size="11" '
                     f'text-anchor="middle">{pct}%</text>')
        parts.append(f'<text x="{ml - 8}" y="{y(frac) + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{pct}%</text>')
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
                 f'stroke="black"/>')
    coords = " ".join(f"{x(far):.2f},{y(frr):.2f}" for far, frr in points)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="#c0392b" '
                 f'stroke-width="1.5"/>')
    parts.append(f'<text x="{ml + pw / 2:.0f}" y="{height - 12}" font-size="13" '
                 f'text-anchor="middle">False acceptance rate (%)</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.0f}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 16 {mt + ph / 2:.0f})">False rejection rate (%)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_eval(args) -> int:
    from .evaluate import (compute_eer, det_points, evaluate, read_scores_csv,
                           write_det_csv, write_eer_json, write_scores_csv)
    from .model import load_checkpoint

    if args.score_file:
        if args.checkpoint or args.trials:
            raise ContractError("--score-file replaces --checkpoint/--trials")
        scores = read_scores_csv(args.score_file)
        result = compute_eer(scores)
        rows = None
    else:
        if not args.checkpoint or not args.trials:
            raise ContractError("eval needs --checkpoint and --trials (or --score-file)")
        cfg, params, feats = load_checkpoint(args.checkpoint)
        out = evaluate(args.trials, cfg, params, metric=args.metric,
                       mode=feats.get("spectrogram_mode", "magnitude"),
                       norm=feats.get("normalization", "per-bin"),
                       threads=_threads())
        result, scores, rows = out.result, out.scores, out.rows
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if rows is not None:
            write_scores_csv(out_dir / "scores.csv", rows)
        pts = det_points(scores)
        write_det_csv(out_dir / "det.csv", pts)
        (out_dir / "det.svg").write_text(render_det_svg(pts))
        write_eer_json(out_dir / "eer.json", result, scores, args.metric)
    print(f"EER={result.eer * 100:.4f}%")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        print("metricforge: a subcommand is required (synth, train, eval)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"metricforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError) as exc:
        print(f"metricforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"metricforge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
