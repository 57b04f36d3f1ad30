"""Command-line surface: synth, train, eval, search, gradcheck."""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import torch

from .config import (ConfigError, RunConfig, apply_overrides, config_from_dict,
                     config_json, load_profile)
from .dataset import (DatasetError, caption_vocabulary, generate_dataset,
                      load_dataset, write_dataset)
from .model import PersonSearchModel

RUN_ROOT_ENV = "TBPS_RUN_ROOT"


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args) -> RunConfig:
    cfg = load_profile(args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.set:
        cfg = apply_overrides(cfg, _parse_overrides(args.set))
    return cfg


def make_run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d_%H%M%S")
        path = root / f"{command}_{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(cfg: RunConfig, run_dir: Path) -> None:
    (run_dir / "config.json").write_text(config_json(cfg), encoding="utf-8")


def load_split(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_dataset(cfg.data, seed=cfg.seed)


def build_model_from_checkpoint(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    cfg = config_from_dict(payload["config"])
    from .tokenizer import Vocabulary
    vocab = Vocabulary(payload["vocab"])
    model = PersonSearchModel(cfg.model, vocab, payload["num_identities"],
                              cfg.train, seed=payload["seed"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


# ---- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = build_config(args)
    run_dir = make_run_dir(args, "synth")
    echo_config(cfg, run_dir)
    split = generate_dataset(cfg.data, seed=cfg.seed)
    write_dataset(split, run_dir)
    print(f"dataset written to {run_dir} "
          f"(train={len(split.train)} gallery={len(split.gallery)} "
          f"queries={len(split.queries)})")
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer
    cfg = build_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.ablate_sdrpn:
        cfg.train.use_sdrpn = False
    if args.ablate_csal:
        cfg.train.use_csal = False
    run_dir = make_run_dir(args, "train")
    echo_config(cfg, run_dir)
    split = load_split(args, cfg)
    vocab = caption_vocabulary(split)
    torch.manual_seed(cfg.seed)
    model = PersonSearchModel(cfg.model, vocab, cfg.data.num_identities,
                              cfg.train, seed=cfg.seed)
    trainer = Trainer(model, split, cfg, run_dir)
    if args.resume:
        trainer.resume()
    checkpoint = trainer.train()
    print(f"checkpoint: {checkpoint}")
    print(f"loss log:   {trainer.log_path}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import Searcher, run_evaluation
    model, cfg, _ = build_model_from_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.set:
        cfg = apply_overrides(cfg, _parse_overrides(args.set))
    run_dir = make_run_dir(args, "eval")
    echo_config(cfg, run_dir)
    split = load_split(args, cfg)
    sizes = None
    if args.gallery_sizes:
        sizes = [int(s) for s in args.gallery_sizes.split(",") if s]
    searcher = Searcher(model, split.gallery, cfg.eval,
                        use_sdrpn=cfg.train.use_sdrpn)
    reports = run_evaluation(searcher, split, seed=cfg.seed, sizes=sizes,
                             out_dir=run_dir)
    for report in reports:
        cmc = " ".join(f"cmc@{k}={v:.4f}" for k, v in sorted(report.cmc.items()))
        print(f"gallery={report.gallery_size} mAP={report.map_score:.4f} {cmc} "
              f"(random mAP={report.baseline_map:.4f})")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_search(args) -> int:
    from .evaluator import Searcher
    model, cfg, _ = build_model_from_checkpoint(args.checkpoint)
    if args.set:
        cfg = apply_overrides(cfg, _parse_overrides(args.set))
    run_dir = make_run_dir(args, "search")
    echo_config(cfg, run_dir)
    split = load_split(args, cfg)
    searcher = Searcher(model, split.gallery, cfg.eval,
                        use_sdrpn=cfg.train.use_sdrpn)
    result = searcher.rank(0, args.query, list(range(len(split.gallery))))
    rows = result.entries[: args.top]
    out_csv = run_dir / "search.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "scene_id", "x1", "y1", "x2", "y2", "score"])
        for rank, e in enumerate(rows, 1):
            writer.writerow([rank, e.scene_index,
                             f"{e.box[0]:.2f}", f"{e.box[1]:.2f}",
                             f"{e.box[2]:.2f}", f"{e.box[3]:.2f}",
                             f"{e.similarity:.6f}"])
    for rank, e in enumerate(rows, 1):
        print(f"{rank:3d}  scene {e.scene_index:4d}  sim {e.similarity:.4f}  "
              f"[{e.box[0]:.0f},{e.box[1]:.0f},{e.box[2]:.0f},{e.box[3]:.0f}]")
    print(f"results: {out_csv}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(instances=args.instances, seed=args.seed or 0,
                        include_broken=args.inject_broken)
    failed = 0
    print(f"{'operation':<22} {'max rel err':>12} {'tolerance':>10}  status")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<22} {r.max_rel_error:>12.3e} {r.tolerance:>10.0e}  {status}")
    return 1 if failed else 0


# ---- argument parsing -------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", default="desk", help="config profile name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted key)")
    p.add_argument("--out", default=None, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbps",
        description="Text-conditioned person search on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory (else generated)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--ablate-sdrpn", action="store_true",
                   help="disable the text-conditioned proposal branch")
    p.add_argument("--ablate-csal", action="store_true",
                   help="disable the cross-scale alignment loss")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run retrieval evaluation")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery-sizes", default=None,
                   help="comma-separated sweep, e.g. 10,50")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="rank gallery scenes for one query")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-broken", action="store_true",
                   help="include a deliberately wrong gradient fixture")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
