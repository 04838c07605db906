"""Command-line entry point: ``fpquality {synth,label,train,eval,edc-plot}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import evalkit
from .config import DEFAULTS, ConfigError, PipelineConfig, dump_config, load_config
from .ingest import IngestError, load_dataset
from .labelgen import LabelError, local_quality_ratio
from .matchkit import MatchError
from .net import ModelConfigError, init_from, load_checkpoint
from .pipeline import LabelArtifacts, evaluate, predict_qualities, run_labeling, synth_dataset, write_dataset
from .train import TrainError, build_model, csv_oracle, finetune, lq_ratio_oracle, pretrain, write_log

logger = logging.getLogger("fpquality")

ABLATIONS = ("none", "no-fusion", "no-regional")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Artifact guard


def guard_output(out_dir: Path, command: str, stamp: dict, force: bool) -> None:
    """Refuse to overwrite ``out_dir`` if it was produced under a different config."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f".{command}.run.json"
    if path.is_file() and not force:
        previous = json.loads(path.read_text())
        if previous != stamp:
            raise CliError(
                f"{out_dir} holds {command} output from a different configuration "
                f"(hash {previous.get('config_hash')} vs {stamp.get('config_hash')}); "
                "choose another --out-dir or pass --force"
            )
    path.write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")


def _stamp(cfg: PipelineConfig, **extra) -> dict:
    return {"config_hash": cfg.digest(), **extra}


# ---------------------------------------------------------------------------
# Argument wiring


def _default_help(key: str, text: str) -> str:
    value = DEFAULTS[key]
    if isinstance(value, tuple):
        value = ",".join(str(v) for v in value)
    return f"{text} (default: {value})"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help=_default_help("seed", "random seed"))
    p.add_argument("--force", action="store_true", help="overwrite outputs from a different configuration")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", help=_default_help("data_root", "dataset directory"))
    p.add_argument("--manifest", type=Path, help="manifest file (default: <data-root>/manifest.csv)")
    p.add_argument("--image-size", type=int, help="network input side length in px (default: 224)")
    p.add_argument("--patch-size", type=int, help=_default_help("patch_size", "quality-map patch size in px"))


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", dest="channels_c", type=int, help=_default_help("channels_c", "encoder output channels"))
    p.add_argument("--attention-dim", type=int, help=_default_help("attention_dim", "fusion attention width"))
    p.add_argument("--regional-hidden", type=int, help=_default_help("regional_hidden", "regional MLP width"))
    p.add_argument("--pretrained", action="store_const", const=True,
                   help="initialize encoders from ImageNet weights when available")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, help=_default_help("lr", "Adam learning rate"))
    p.add_argument("--weight-decay", type=float, help=_default_help("weight_decay", "Adam weight decay"))
    p.add_argument("--power", type=float, help=_default_help("power", "polynomial decay power"))
    p.add_argument("--epochs-pretrain", type=int, help=_default_help("epochs_pretrain", "pretraining epochs"))
    p.add_argument("--epochs-finetune", type=int, help=_default_help("epochs_finetune", "fine-tuning epochs"))
    p.add_argument("--batch-size", type=int, help=_default_help("batch_size", "batch size"))
    for i, what in ((1, "match-score"), (2, "cosine"), (3, "global quality"), (4, "quality-map")):
        p.add_argument(f"--lambda{i}", type=float, help=_default_help(f"lambda{i}", f"{what} loss weight"))
    p.add_argument("--margin", dest="margin_m", type=float, help=_default_help("margin_m", "cosine loss margin"))
    p.add_argument("--epsilon", type=float, help=_default_help("epsilon", "cosine denominator floor"))
    p.add_argument("--augment-copies", type=int,
                   help=_default_help("augment_copies", "augmented copies per sample when pretraining"))


OVERRIDE_KEYS = (
    "seed", "data_root", "patch_size", "threshold", "impostor_ratio", "fmr_target", "max_fraction",
    "channels_c", "attention_dim", "regional_hidden", "pretrained", "lr", "weight_decay", "power",
    "epochs_pretrain", "epochs_finetune", "batch_size", "lambda1", "lambda2", "lambda3", "lambda4",
    "margin_m", "epsilon", "augment_copies", "checkpoint_dir", "output_dir",
)


def _overrides(args: argparse.Namespace) -> dict:
    out = {k: getattr(args, k) for k in OVERRIDE_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "image_size", None) is not None:
        out["input_size"] = (args.image_size, args.image_size)
    if getattr(args, "fractions", None) is not None:
        out["fractions"] = args.fractions
    ablation = getattr(args, "ablation", None)
    if ablation == "no-fusion":
        out["use_fusion"] = False
    elif ablation == "no-regional":
        out["use_regional_head"] = False
    return out


def _config(args: argparse.Namespace) -> PipelineConfig:
    return load_config(args.config, _overrides(args))


def _load_samples(cfg: PipelineConfig, args: argparse.Namespace):
    root = Path(cfg.data_root)
    manifest = args.manifest or root / "manifest.csv"
    if not Path(manifest).is_file():
        raise CliError(f"manifest {manifest} not found")
    return load_dataset(root, manifest, cfg.input_size)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out_dir)
    stamp = {"command": "synth", "n_subjects": args.n_subjects, "fingers": args.fingers,
             "captures": args.captures, "quality_spread": args.quality_spread, "seed": seed,
             "image_size": args.image_size, "modality": args.modality}
    try:
        guard_output(out_dir, "synth", stamp, args.force)
    except OSError as exc:
        raise CliError(f"cannot write to {out_dir}: {exc}") from exc
    records = synth_dataset(args.n_subjects, args.fingers, args.captures, args.quality_spread, seed,
                            (args.image_size, args.image_size), args.modality)
    manifest = write_dataset(records, out_dir)
    print(f"wrote {len(records)} samples to {manifest}")
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out_dir or cfg.output_dir)
    guard_output(out_dir, "label", _stamp(cfg, command="label"), args.force)
    loaded = _load_samples(cfg, args)
    samples = [s for s in loaded if s.modality == "fingerphoto"] or loaded
    art = run_labeling(samples, cfg.patch_size, cfg.threshold, cfg.impostor_ratio, cfg.train.seed)
    art.write(out_dir)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"labelled {len(art.labels)} samples into {out_dir / 'labels.csv'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ckpt_dir = Path(args.checkpoint_dir or cfg.checkpoint_dir)
    model_cfg = cfg.model_config()
    stamp = _stamp(cfg, command="train", stage=args.stage, ablation=args.ablation)
    guard_output(ckpt_dir, f"train-{args.stage}", stamp, args.force)
    samples = _load_samples(cfg, args)
    seed = cfg.train.seed
    model = build_model(model_cfg, seed)
    meta = {"ablation": args.ablation, "config_hash": cfg.digest(),
            "use_fusion": model_cfg.use_fusion, "use_regional_head": model_cfg.use_regional_head}
    out = ckpt_dir / f"{args.stage}.pt"

    if args.stage == "pretrain":
        prints = [s for s in samples if s.modality == "fingerprint"]
        if not prints:
            logger.warning("no fingerprint samples in manifest; pretraining on all samples")
            prints = samples
        oracle = csv_oracle(args.oracle_csv) if args.oracle_csv else lq_ratio_oracle(cfg.patch_size, cfg.threshold)
        result = pretrain(model, prints, oracle, cfg.train, out, cfg.augment_copies, meta)
    else:
        if args.label_dir is None:
            raise CliError("finetune needs --label-dir (output of the label command)")
        if not args.from_scratch:
            init = Path(args.init) if args.init else ckpt_dir / "pretrain.pt"
            if not init.is_file():
                raise CliError(f"pretrain checkpoint {init} not found (run --stage pretrain or pass --from-scratch)")
            init_from(model, load_checkpoint(init))
            meta["init"] = str(init)
        art = LabelArtifacts.read(args.label_dir)
        photos = [s for s in samples if s.sample_id in art.maps]
        result = finetune(model, photos, art.labels, art.maps, art.pairs, art.tables,
                          cfg.train, cfg.weights, out, meta)
    write_log(ckpt_dir / f"{args.stage}_log.csv", result.history)
    print(f"{args.stage}: final loss {result.losses[-1]:.6f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out_dir or cfg.output_dir)
    guard_output(out_dir, "eval", _stamp(cfg, command="eval", checkpoint=str(args.checkpoint)), args.force)
    ckpt = load_checkpoint(args.checkpoint)
    art = LabelArtifacts.read(args.label_dir)
    samples = [s for s in _load_samples(cfg, args) if s.sample_id in art.maps]
    predicted = predict_qualities(ckpt.model, samples)

    with open(out_dir / "predicted_quality.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "quality"])
        for sid in sorted(predicted):
            writer.writerow([sid, f"{predicted[sid]:.6f}"])

    methods = {
        "model": predicted,
        "lq_ratio": {sid: local_quality_ratio(m, cfg.threshold) for sid, m in art.maps.items()},
    }
    result = evaluate(art.raw_tables, methods, cfg.fmr_target, cfg.fractions, cfg.max_fraction,
                      random_draws=args.random_draws, seed=cfg.train.seed)
    for (matcher, method), curve in sorted(result.curves.items()):
        curve.write(out_dir / f"edc_{matcher}_{method}.csv")
    (out_dir / "pauc_summary.csv").write_text(result.summary_csv(), encoding="utf-8")
    evalkit.emit_edc_plot([(f"{m} / {meth}", c) for (m, meth), c in sorted(result.curves.items())],
                          out_dir / "edc.png")
    evalkit.export_embeddings(ckpt, samples, out_dir / "embeddings.csv", art.label_by_id())
    print(result.summary_csv(), end="")
    return 0


def cmd_edc_plot(args: argparse.Namespace) -> int:
    curves = []
    for item in args.curve:
        if "=" not in item:
            raise CliError(f"--curve expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        curves.append((name, evalkit.EdcCurve.read(path)))
    out = evalkit.emit_edc_plot(curves, args.out)
    print(f"wrote {out}")
    return 0


def _fractions(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpquality", description="Utility-guided fingerphoto quality assessment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ridge-image dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--fingers", type=int, default=1)
    p.add_argument("--captures", type=int, default=2, help="captures per finger")
    p.add_argument("--quality-spread", type=float, default=0.5, help="0 = identical degradation for all samples")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--modality", choices=("fingerphoto", "fingerprint"), default="fingerphoto")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="score pairs with the toy matchers and write quality labels")
    _add_common(p)
    _add_data(p)
    p.add_argument("--threshold", type=int, help=_default_help("threshold", "good-patch quality threshold"))
    p.add_argument("--impostor-ratio", type=float, help=_default_help("impostor_ratio", "impostor pairs per genuine pair"))
    p.add_argument("--out-dir", help=_default_help("output_dir", "output directory"))
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="pretrain on fingerprints or fine-tune on labelled fingerphotos")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--stage", choices=("pretrain", "finetune"), required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default="none", help="model variant (default: none)")
    p.add_argument("--from-scratch", action="store_true", help="fine-tune without a pretrain checkpoint")
    p.add_argument("--init", help="pretrain checkpoint (default: <checkpoint-dir>/pretrain.pt)")
    p.add_argument("--label-dir", help="output directory of the label command")
    p.add_argument("--oracle-csv", help="sample_id,score CSV of external pretraining labels")
    p.add_argument("--checkpoint-dir", help=_default_help("checkpoint_dir", "checkpoint directory"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="EDC curves, pAUC summary, plot and embeddings for a checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label-dir", required=True)
    p.add_argument("--out-dir", help=_default_help("output_dir", "output directory"))
    p.add_argument("--fmr-target", type=float, help=_default_help("fmr_target", "FMR of the decision threshold"))
    p.add_argument("--fractions", type=_fractions, help=_default_help("fractions", "discard fractions"))
    p.add_argument("--max-fraction", type=float, help=_default_help("max_fraction", "upper pAUC limit"))
    p.add_argument("--random-draws", type=int, default=20, help="random-quality baselines to average (default: 20)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edc-plot", help="plot EDC CSV files into one PNG")
    p.add_argument("--curve", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_edc_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, IngestError, MatchError, LabelError, TrainError,
            ModelConfigError, evalkit.EvalError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
