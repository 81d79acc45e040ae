"""Command-line entry point: ``nodule-sfuda <command> [options]``.

Every command reads one JSON run config, writes a JSON report, and exits
with 0 (ok), 2 (invalid config), 3 (failed check) or 4 (I/O problem).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adapt_pipeline
from .data import (SynthDomainSpec, assign_splits, gen_synth_scan, load_split, read_manifest,
                   write_manifest, write_scan)
from .detector import load_checkpoint, save_checkpoint
from .detector.train import DetectorConfig, detect_scans, evaluate_model, train_source
from .froc import (evaluate, format_table, read_annotations_csv, read_predictions_csv,
                   write_annotations_csv, write_predictions_csv)
from .froc import report as froc_report

logger = logging.getLogger("nodule_sfuda")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4

DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "reference.json"

# key -> (meaning, provenance). "method" marks values taken from the published
# method description; "desk-scale" marks choices made for this CPU artifact.
KEY_DOCS = {
    "seed": ("master seed for data, source training and adaptation", "desk-scale"),
    "out_dir": ("directory for reports, checkpoints and predictions", "desk-scale"),
    "workers": ("cap on worker processes (benchmark seeds run in parallel)", "desk-scale"),
    "n_source_scans": ("scans generated for the source domain", "desk-scale"),
    "n_target_scans": ("scans generated for the target domain", "desk-scale"),
    "source.*": ("synthetic source appearance: side, nodule count/radius, HU levels, noise, "
                 "contrast, vessels, seed", "desk-scale"),
    "target.*": ("synthetic target appearance, same fields as source", "desk-scale"),
    "detector.lr": ("SGD learning rate, 5e-4", "method: training setup"),
    "detector.momentum": ("SGD momentum, 0.9", "method: training setup"),
    "detector.weight_decay": ("SGD weight decay, 1e-4", "method: training setup"),
    "detector.batch_size": ("patches per iteration, 8", "method: training setup"),
    "detector.epochs": ("maximum source-training epochs, 100", "method: training setup"),
    "detector.patch_side": ("training patch side in voxels (the full-size path uses 128)",
                            "desk-scale"),
    "detector.patches_per_scan": ("random crops per scan per epoch", "desk-scale"),
    "detector.top_n": ("proposals kept after NMS", "desk-scale"),
    "detector.nms_iou": ("NMS IoU threshold", "desk-scale"),
    "detector.pre_nms_top_n": ("anchors scored before NMS", "desk-scale"),
    "detector.pos_iou": ("anchor/RoI IoU for a positive label", "desk-scale"),
    "detector.neg_iou": ("anchor/RoI IoU below which a label is negative", "desk-scale"),
    "detector.rpn_max_pos": ("cap on positive RPN anchors per patch (null = all)", "desk-scale"),
    "detector.rpn_max_neg": ("cap on negative RPN anchors per patch (null = all)", "desk-scale"),
    "detector.rpn_hard_fraction": ("share of sampled negatives chosen by score", "desk-scale"),
    "detector.roi_max_pos": ("cap on positive RoIs per patch (null = all)", "desk-scale"),
    "detector.roi_max_neg": ("cap on negative RoIs per patch (null = all)", "desk-scale"),
    "detector.detections_per_scan": ("detections kept per scan at inference", "desk-scale"),
    "adapt.t_fg": ("RPN score at or above which a proposal is a foreground instance, 0.9",
                   "method: instance auto-labelling"),
    "adapt.t_bg": ("RPN score at or below which a proposal is a background instance, 0.1",
                   "method: instance auto-labelling"),
    "adapt.max_fg": ("at most 16 foreground instances per patch", "method: instance auto-labelling"),
    "adapt.max_bg": ("at most 32 background instances per patch", "method: instance auto-labelling"),
    "adapt.delta": ("pseudo-nodule confidence threshold, 0.7", "method: threshold ablation"),
    "adapt.beta": ("teacher EMA decay, 0.9996", "method: EMA ablation"),
    "adapt.eta": ("weight of the pseudo-label detection loss, 1", "method: loss-weight ablation"),
    "adapt.contrastive.sim_clamp_eps": ("log clamp for cosine similarities, 1e-6", "desk-scale"),
    "adapt.contrastive.omega": ("rank-weight decay exp(-omega * rank), 0.25", "desk-scale"),
    "adapt.we.tau1": ("lower weighted-entropy gate, 0.25", "method: loss definition"),
    "adapt.we.tau2": ("upper weighted-entropy gate, 0.75", "method: loss definition"),
    "adapt.we.gamma": ("focusing exponent, 4", "method: gamma ablation"),
    "adapt.we.alpha": ("class balance factor, 0.1", "method: alpha ablation"),
    "adapt.we.detach_modulation": ("stop gradients through the focal factor", "desk-scale"),
    "adapt.we.eps": ("probability clamp inside the logarithm", "desk-scale"),
    "adapt.epochs": ("maximum epochs for each adaptation step, 100", "method: training setup"),
    "adapt.nms_iou": ("NMS IoU for adaptation proposals", "desk-scale"),
    "adapt.top_n": ("proposals considered per patch during adaptation", "desk-scale"),
    "adapt.patches_per_scan": ("random crops per target scan per epoch", "desk-scale"),
    "adapt.normalize": ("student loss as per-stage means instead of sums", "desk-scale"),
    "adapt.contrastive_features": ("pool instances after ('relu') or before ('pre') the last "
                                   "backbone ReLU", "desk-scale"),
    "benchmark.seeds": ("adaptation seeds averaged by the benchmark", "desk-scale"),
    "benchmark.min_gain": ("required FROC gain of full adaptation over source-only", "desk-scale"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkConfig:
    seeds: tuple = (17, 18, 19)
    min_gain: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("benchmark.seeds must not be empty")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 17
    out_dir: str = "runs/reference"
    workers: int = 1
    n_source_scans: int = 60
    n_target_scans: int = 60
    source: SynthDomainSpec = field(default_factory=lambda: SynthDomainSpec(name="src"))
    target: SynthDomainSpec = field(default_factory=lambda: SynthDomainSpec(name="tgt", seed=1))
    detector: DetectorConfig = DetectorConfig()
    adapt: AdaptConfig = AdaptConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.n_source_scans < 1 or self.n_target_scans < 1:
            raise ValueError("scan counts must be >= 1")
        if self.source.name == self.target.name:
            raise ValueError("source and target domains need distinct names")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key in ("source", "target"):
                if key in d:
                    d[key] = SynthDomainSpec.from_dict(d[key])
            if "detector" in d:
                d["detector"] = DetectorConfig.from_dict(d["detector"])
            if "adapt" in d:
                d["adapt"] = AdaptConfig.from_dict(d["adapt"])
            if "benchmark" in d:
                b = d["benchmark"]
                extra = set(b) - {f.name for f in fields(BenchmarkConfig)}
                if extra:
                    raise ValueError(f"unknown benchmark keys: {sorted(extra)}")
                d["benchmark"] = BenchmarkConfig(**b)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(raw)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(report))
    return path


# -- data helpers ------------------------------------------------------------

def make_corpus(cfg: RunConfig):
    """In-memory corpus: ``{domain: {split: [ScanRecord]}}``."""
    corpus = {}
    for spec, n in ((cfg.source, cfg.n_source_scans), (cfg.target, cfg.n_target_scans)):
        splits = {"train": [], "val": [], "test": []}
        for i, split in enumerate(assign_splits(n)):
            splits[split].append(gen_synth_scan(spec, i))
        corpus[spec.name] = splits
    return corpus


def write_corpus(cfg: RunConfig, root) -> dict:
    root = Path(root)
    corpus = make_corpus(cfg)
    entries, anns = [], {}
    for domain, splits in corpus.items():
        for split, scans in splits.items():
            for scan in scans:
                write_scan(scan, root)
                entries.append({"id": scan.id, "domain": domain, "split": split})
                anns[scan.id] = scan.annotations
    entries.sort(key=lambda e: e["id"])
    write_manifest(root, entries)
    write_annotations_csv(root / "annotations.csv", dict(sorted(anns.items())))
    counts = {d: {s: len(v) for s, v in sp.items()} for d, sp in corpus.items()}
    return {"root": str(root), "scans": len(entries), "splits": counts}


def _load(root, domain, split, with_annotations=True):
    return load_split(root, domain, split, with_annotations)


# -- benchmark -----------------------------------------------------------------

def _benchmark_seed(args):
    source_params, corpus, cfg, seed = args
    tgt = corpus[cfg.target.name]
    train = [s.__class__(s.id, s.voxels, s.spacing, []) for s in tgt["train"]]
    test = tgt["test"]
    full, rep_full = adapt_pipeline(source_params, train, cfg.adapt, cfg.detector, seed, "all")
    s2, rep_s2 = adapt_pipeline(source_params, train, cfg.adapt, cfg.detector, seed, "2")
    return {"seed": seed,
            "full": evaluate_model(full, test, cfg.detector)[0].as_dict(),
            "step2_only": evaluate_model(s2, test, cfg.detector)[0].as_dict(),
            "step1_history": rep_full["step1"],
            "pseudo_counts_full": rep_full["pseudo_counts"],
            "pseudo_counts_step2_only": rep_s2["pseudo_counts"]}


def run_benchmark(cfg: RunConfig, source_params=None) -> dict:
    """Source-only vs step-2-only vs full adaptation on the target test split."""
    corpus = make_corpus(cfg)
    if source_params is None:
        source_params, _ = train_source(corpus[cfg.source.name]["train"], cfg.detector, cfg.seed)
    tgt_test = corpus[cfg.target.name]["test"]
    src_only = evaluate_model(source_params, tgt_test, cfg.detector)[0]
    jobs = [(source_params, corpus, cfg, s) for s in cfg.benchmark.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(cfg.workers, len(jobs))) as pool:
            runs = list(pool.map(_benchmark_seed, jobs))
    else:
        runs = [_benchmark_seed(j) for j in jobs]
    full_mean = float(np.mean([r["full"]["average"] for r in runs]))
    s2_mean = float(np.mean([r["step2_only"]["average"] for r in runs]))
    gain = full_mean - src_only.average
    checks = {"full_beats_source": bool(gain >= cfg.benchmark.min_gain),
              "full_beats_step2_only": bool(full_mean > s2_mean)}
    return {"seed": cfg.seed, "seeds": list(cfg.benchmark.seeds),
            "source_only": src_only.as_dict(), "runs": runs,
            "mean_full": full_mean, "mean_step2_only": s2_mean, "gain_over_source": gain,
            "checks": checks, "passed": all(checks.values())}


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = Path(args.out or Path(cfg.out_dir) / "data")
    summary = write_corpus(cfg, out)
    return {"command": "gen-data", **summary}, True


def cmd_train_source(cfg, args):
    data = Path(args.data)
    train = _load(data, cfg.source.name, "train")
    val = _load(data, cfg.source.name, "val")
    params, hist = train_source(train, cfg.detector, cfg.seed)
    ckpt = Path(args.ckpt or Path(cfg.out_dir) / "source.ckpt")
    save_checkpoint(params, ckpt, {"seed": cfg.seed, "stage": "source"})
    report = {"command": "train-source", "checkpoint": str(ckpt), "losses": hist,
              "val_froc": evaluate_model(params, val, cfg.detector)[0].as_dict() if val else None}
    return report, True


def cmd_adapt(cfg, args):
    data = Path(args.data)
    source, _ = load_checkpoint(args.ckpt)
    train = _load(data, cfg.target.name, "train", with_annotations=False)
    val = _load(data, cfg.target.name, "val")
    params, report = adapt_pipeline(source, train, cfg.adapt, cfg.detector, cfg.seed, args.step, val)
    out = Path(args.out_ckpt or Path(cfg.out_dir) / f"adapted_step{args.step}.ckpt")
    save_checkpoint(params, out, {"seed": cfg.seed, "stage": f"adapt-{args.step}"})
    report = {"command": "adapt", "checkpoint": str(out), **report}
    return report, True


def cmd_infer(cfg, args):
    params, _ = load_checkpoint(args.ckpt)
    data = Path(args.data)
    if (data / "dataset.json").exists():
        scans = _load(data, args.domain or cfg.target.name, args.split, with_annotations=False)
    else:
        scans = []
    dets = detect_scans(params, scans, cfg.detector)
    out = Path(args.pred or Path(cfg.out_dir) / "predictions.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out, dets)
    return {"command": "infer", "predictions": str(out), "scans": len(scans),
            "detections": sum(len(v) for v in dets.values())}, True


def cmd_froc(cfg, args):
    dets = read_predictions_csv(args.pred)
    anns = read_annotations_csv(args.ann)
    if args.data:
        ids = [e["id"] for e in read_manifest(args.data)
               if e["domain"] == (args.domain or cfg.target.name) and e["split"] == args.split]
        anns = {i: anns.get(i, []) for i in ids}
        dets = {i: d for i, d in dets.items() if i in anns}
    result, curve = evaluate(dets, anns, n_scans=len(anns))
    print(format_table(result))
    return {"command": "froc", **froc_report(result, curve)}, True


def cmd_gradcheck(cfg, args):
    from .gradcheck import run_all

    results = run_all(seed=args.check_seed, n_instances=args.instances)
    passed = all(r.passed for r in results)
    for r in results:
        logger.info("%-28s %s max rel err %.2e (tol %.0e)", r.name, "ok" if r.passed else "FAIL",
                    r.max_rel_err, r.tol)
    checks = []
    for r in results:
        d = r.as_dict()
        d.pop("seconds", None)
        checks.append(d)
    return {"command": "gradcheck", "checks": checks, "passed": passed}, passed


def cmd_selftest(cfg, args):
    from .selftest import run_selftest

    checks = run_selftest(cfg.seed)
    passed = all(c["passed"] for c in checks)
    for c in checks:
        logger.info("%-32s %s", c["name"], "ok" if c["passed"] else "FAIL")
    return {"command": "selftest", "checks": checks, "passed": passed}, passed


def cmd_benchmark(cfg, args):
    source = load_checkpoint(args.ckpt)[0] if args.ckpt else None
    report = run_benchmark(cfg, source)
    print(f"source-only {100 * report['source_only']['average']:.2f}  "
          f"step2-only {100 * report['mean_step2_only']:.2f}  "
          f"full {100 * report['mean_full']:.2f}")
    return {"command": "benchmark", **report}, report["passed"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "froc": cmd_froc,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "benchmark": cmd_benchmark,
}


def config_help() -> str:
    lines = ["config keys (JSON; flags --seed/--out-dir/--workers override top-level keys):"]
    width = max(len(k) for k in KEY_DOCS)
    for key, (meaning, prov) in KEY_DOCS.items():
        lines.append(f"  {key:<{width}}  {meaning} [{prov}]")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="run config JSON")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out-dir", help="override config out_dir")
    common.add_argument("--workers", type=int, help="override config workers")
    common.add_argument("--report", help="report path (default <out_dir>/<command>.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="nodule-sfuda", description="Source-free adaptation of a 3D nodule detector.",
        epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, epilog=config_help(),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("gen-data", "write the synthetic source/target corpus")
    p.add_argument("--out", help="corpus directory (default <out_dir>/data)")

    p = add("train-source", "supervised training on the source train split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="output checkpoint")

    p = add("adapt", "source-free adaptation on the target train split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="source checkpoint")
    p.add_argument("--step", choices=["1", "2", "all"], default="all")
    p.add_argument("--out-ckpt")

    p = add("infer", "write a predictions CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain")
    p.add_argument("--split", default="test")
    p.add_argument("--pred", help="output CSV")

    p = add("froc", "score predictions against annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--data", help="restrict to one split of this corpus")
    p.add_argument("--domain")
    p.add_argument("--split", default="test")

    p = add("gradcheck", "finite-difference checks of every loss and the full detector")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--check-seed", type=int, default=0)

    add("selftest", "invariant checks")

    p = add("benchmark", "source-only vs step-2-only vs full adaptation")
    p.add_argument("--ckpt", help="reuse a source checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "out_dir": args.out_dir, "workers": args.workers}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(json.dumps({"error": "invalid_config", "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(json.dumps({"error": "io", "detail": str(exc)}), file=sys.stderr)
        return EXIT_IO
    t0 = time.time()
    try:
        report, ok = COMMANDS[args.command](cfg, args)
        report["config"] = cfg.to_dict()
        path = Path(args.report or Path(cfg.out_dir) / f"{args.command}.json")
        write_report(path, report)
    except (OSError, KeyError) as exc:
        print(json.dumps({"error": "io", "detail": str(exc)}), file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(json.dumps({"error": "invalid_input", "detail": str(exc)}), file=sys.stderr)
        return EXIT_IO
    logger.info("%s done in %.1fs", args.command, time.time() - t0)
    if not ok:
        print(json.dumps({"error": "check_failed", "report": str(path)}), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
