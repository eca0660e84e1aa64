"""Command line entry point.

Subcommands cover the full pipeline: pretrain, finetune-gan, eval, train-dit,
sweep, report, config. Every failure exits nonzero with a single JSON error
object on stderr so callers can script against it.
"""

import argparse
import json
import os
import sys

from . import __version__


def _emit_error(exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return 1


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def cmd_pretrain(args) -> int:
    from .config import load_train_config
    from .trainer import Trainer

    cfg = load_train_config(args.config)
    if cfg.stage != "pretrain":
        raise ValueError(f"pretrain requires stage 'pretrain', config says {cfg.stage!r}")
    trainer = Trainer(cfg, out_dir=args.out)
    trainer.run(resume=args.resume,
                metrics_path=os.path.join(args.out, "train_log.jsonl"))
    print(json.dumps({"status": "ok", "steps": trainer.state.step,
                      "flops": str(trainer.state.flops_cum),
                      "checkpoint": os.path.join(args.out, "final")}))
    return 0


def cmd_finetune_gan(args) -> int:
    from .config import load_train_config
    from .trainer import Trainer

    cfg = load_train_config(args.config)
    if cfg.stage != "gan_finetune":
        raise ValueError(
            f"finetune-gan requires stage 'gan_finetune', config says {cfg.stage!r}")
    if not args.resume and not args.init:
        raise ValueError("finetune-gan needs --init (stage-1 weights) or --resume")
    trainer = Trainer(cfg, out_dir=args.out)
    if args.resume:
        trainer.run(resume=args.resume,
                    metrics_path=os.path.join(args.out, "train_log.jsonl"))
    else:
        trainer.load_weights(args.init)
        trainer.run(metrics_path=os.path.join(args.out, "train_log.jsonl"))
    print(json.dumps({"status": "ok", "steps": trainer.state.step,
                      "checkpoint": os.path.join(args.out, "final")}))
    return 0


def cmd_eval(args) -> int:
    from .data import Vocab, dataset_from_manifest, load_manifest
    from .evaluation import compute_metrics, save_metrics, train_feature_extractor
    from .trainer import load_tokenizer

    model, manifest = load_tokenizer(args.ckpt)
    ds_manifest = load_manifest(args.dataset)
    dataset = dataset_from_manifest(ds_manifest)
    vocab = Vocab(word_to_id={w: int(i) for w, i in manifest["vocab"].items()})
    extractor = train_feature_extractor(
        dataset.image_size, num_classes=dataset.num_classes,
        cache_dir=args.extractor_cache,
        variant=getattr(dataset, "variant", "plain"))
    record = compute_metrics(model, dataset, vocab, extractor, n_eval=args.n_eval)
    save_metrics(record, args.out)
    print(json.dumps({"status": "ok", "metrics": args.out,
                      "psnr": record.psnr_mean, "frechet_rec": record.frechet_rec,
                      "linprobe": record.linprobe_acc, "zeroshot": record.zeroshot_acc}))
    return 0


def cmd_train_dit(args) -> int:
    from .data import dataset_from_manifest, load_manifest
    from .evaluation import train_feature_extractor
    from .genharness import DiTConfig, train_and_score
    from .trainer import load_tokenizer

    model, manifest = load_tokenizer(args.tokenizer)
    dit_doc = _load_json(args.dit) if args.dit else {}
    model_cfg = manifest["train_config"]["model"]
    dit_doc.setdefault("latent_dim", model_cfg["latent_dim"])
    dit_doc.setdefault("grid", model_cfg["image_size"] // model_cfg["patch_size"])
    if args.dataset:
        ds_manifest = load_manifest(args.dataset)
    else:
        ds_manifest = manifest["train_config"]["dataset"]
    dataset = dataset_from_manifest(ds_manifest)
    dit_doc.setdefault("num_classes", dataset.num_classes)
    dit_cfg = DiTConfig(**dit_doc).validate()
    extractor = train_feature_extractor(
        dataset.image_size, num_classes=dataset.num_classes,
        cache_dir=args.extractor_cache,
        variant=getattr(dataset, "variant", "plain"))
    record = train_and_score(model, dataset, dit_cfg, extractor, n_score=args.n_score)
    with open(args.out, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    print(json.dumps({"status": "ok", "record": args.out,
                      "frechet_gen": record["frechet_gen"]}))
    return 0


def cmd_sweep(args) -> int:
    from .sweep import load_sweep_spec, run_sweep

    spec = load_sweep_spec(args.spec)
    if args.dry_run:
        jobs = run_sweep(spec, args.registry, args.work, dry_run=True)
        print(json.dumps({"status": "dry-run", "jobs": jobs}, indent=2))
        return 0
    appended = run_sweep(spec, args.registry, args.work,
                         force_new_id=args.force_new_id,
                         extractor_cache=args.extractor_cache)
    failed = [r["point_id"] for r in appended if r["status"] != "ok"]
    print(json.dumps({"status": "ok" if not failed else "partial",
                      "appended": len(appended), "failed": failed}))
    return 0 if not failed else 1


def cmd_report(args) -> int:
    from .report import report

    summary = report(args.registry, args.axis, args.out)
    print(json.dumps({"status": "ok", **summary}, sort_keys=True))
    return 0


def cmd_config(args) -> int:
    from .config import default_config_json, load_train_config

    if args.print_defaults:
        print(default_config_json())
        return 0
    if args.check:
        cfg = load_train_config(args.check)
        print(json.dumps({"status": "ok", "config": cfg.to_dict()}, sort_keys=True))
        return 0
    raise ValueError("config: pass --print-defaults or --check <path>")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtp", description=__doc__)
    p.add_argument("--version", action="version", version=f"vtp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="joint pre-training of the tokenizer")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None, help="checkpoint dir to resume from")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune-gan", help="adversarial decoder fine-tune")
    sp.add_argument("--config", required=True)
    sp.add_argument("--init", default=None, help="stage-1 checkpoint to start from")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None)
    sp.set_defaults(fn=cmd_finetune_gan)

    sp = sub.add_parser("eval", help="reconstruction, probe, and retrieval metrics")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dataset", required=True, help="dataset manifest JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-eval", type=int, default=256)
    sp.add_argument("--extractor-cache", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("train-dit", help="train the frozen-tokenizer flow harness")
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dit", default=None, help="harness config JSON")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--n-score", type=int, default=512)
    sp.add_argument("--extractor-cache", default=None)
    sp.set_defaults(fn=cmd_train_dit)

    sp = sub.add_parser("sweep", help="run a single-axis sweep")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--registry", required=True)
    sp.add_argument("--work", required=True)
    sp.add_argument("--dry-run", action="store_true")
    sp.add_argument("--force-new-id", action="store_true",
                    help="append new attempts even for completed points")
    sp.add_argument("--extractor-cache", default=None)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate a registry into CSV and figures")
    sp.add_argument("--registry", required=True)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("config", help="config utilities")
    sp.add_argument("--print-defaults", action="store_true")
    sp.add_argument("--check", default=None, help="validate a config file")
    sp.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return _emit_error(RuntimeError("interrupted"))
    except BaseException as e:  # noqa: BLE001 - CLI boundary
        return _emit_error(e)


if __name__ == "__main__":
    sys.exit(main())
