"""Command-line entry point: ``moetune <subcommand> [flags]``.

Every subcommand reads an optional YAML config, applies flag overrides,
writes its outputs under ``--out-dir`` and records a ``run_manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable

import yaml

from . import __version__
from . import analytics, annotation, evaluation
from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from .data import read_jsonl, load_examples, synth_corpus, synth_dataset, write_jsonl, DIALECTS
from .inference import infer
from .model import PRESETS, DenseTransformer, ModelConfig, MoETransformer, count_parameters, upcycle_from_dense
from .train import DESK_DEFAULTS, TrainConfig, continual_pretrain, moe_tune

log = logging.getLogger("moetune")

# Config file schema: top-level section -> allowed keys (None: free-form mapping).
CONFIG_SCHEMA: dict[str, set | None] = {
    "seed": None,
    "data": {"n_train", "n_test", "n_corpus", "types", "vulnerable_fraction"},
    "model": {"preset", "overrides"},
    "pretrain": set(TrainConfig.__dataclass_fields__) - {"stage"},
    "moe_tune": set(TrainConfig.__dataclass_fields__) - {"stage"},
    "upcycle": {"experts", "top_k", "router_std"},
    "infer": {"n_votes", "max_new_tokens", "temperature"},
    "analysis": {"layers", "threshold", "span"},
    "annotation": None,
    "param_count": {"preset", "experts", "top_k"},
}

DEFAULTS = {
    "seed": 0,
    "data": {"n_train": 32, "n_test": 16, "n_corpus": 1024, "types": list(DIALECTS), "vulnerable_fraction": 0.5},
    "model": {"preset": "desk", "overrides": {}},
    "pretrain": {k: v for k, v in DESK_DEFAULTS["continual-pretrain"].to_dict().items() if k != "stage"},
    "moe_tune": {k: v for k, v in DESK_DEFAULTS["moe-tune"].to_dict().items() if k != "stage"},
    "upcycle": {"experts": 8, "top_k": 2, "router_std": 0.02},
    "infer": {"n_votes": 5, "max_new_tokens": 96, "temperature": 0.0},
    "analysis": {"layers": None, "threshold": 0.02, "span": "prompt"},
    "annotation": {"mode": "scripted"},
    "param_count": {"preset": "llama-3.2-3b", "experts": 8, "top_k": 2},
}


class CliError(Exception):
    """User-facing failure: reported on stderr with exit code 2."""


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise CliError(f"config {path}: invalid YAML ({exc})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path}: top level must be a mapping")
    for section, value in cfg.items():
        if section not in CONFIG_SCHEMA:
            raise CliError(f"config {path}: unknown section {section!r}")
        allowed = CONFIG_SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise CliError(f"config {path}: section {section!r} must be a mapping")
        unknown = set(value) - allowed
        if unknown:
            raise CliError(f"config {path}: unknown keys in {section!r}: {sorted(unknown)}")
    return cfg


def resolve_config(args) -> dict:
    """Defaults, then the config file, then flags."""
    file_cfg = load_config(args.config)
    cfg = json.loads(json.dumps(DEFAULTS))
    for section, value in file_cfg.items():
        if isinstance(value, dict) and isinstance(cfg.get(section), dict):
            cfg[section].update(value)
        else:
            cfg[section] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.alpha is not None:
        cfg["moe_tune"]["alpha"] = args.alpha
    if args.experts is not None:
        cfg["upcycle"]["experts"] = cfg["param_count"]["experts"] = args.experts
    if args.top_k is not None:
        cfg["upcycle"]["top_k"] = cfg["param_count"]["top_k"] = args.top_k
    if args.n_votes is not None:
        cfg["infer"]["n_votes"] = args.n_votes
    if args.layers is not None:
        cfg["analysis"]["layers"] = args.layers
    return cfg


def _train_config(cfg: dict, section: str, stage: str) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**cfg[section], "stage": stage, "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise CliError(f"config section {section!r}: {exc}") from None


def _model_config(cfg: dict) -> ModelConfig:
    preset = cfg["model"].get("preset", "desk")
    if preset not in PRESETS:
        raise CliError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
    try:
        base = PRESETS[preset]()
        return ModelConfig.from_dict({**base.to_dict(), **(cfg["model"].get("overrides") or {})})
    except (TypeError, ValueError) as exc:
        raise CliError(f"model config: {exc}") from None


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _need_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise CliError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{flag}: file not found: {path}")
    return p


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_model(path: Path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError) as exc:
        raise CliError(str(exc)) from None


# ---------------------------------------------------------------- subcommands
# Each returns (input paths, output paths).


def cmd_synth_data(args, cfg, out: Path):
    d, seed = cfg["data"], cfg["seed"]
    types = tuple(d["types"])
    train = synth_dataset(d["n_train"], seed=seed, types=types, vulnerable_fraction=d["vulnerable_fraction"])
    test = synth_dataset(d["n_test"], seed=seed + 10_000, types=types, vulnerable_fraction=d["vulnerable_fraction"])
    for ex in test:
        ex.id = f"test-{ex.id}"
    corpus = synth_corpus(d["n_corpus"], seed=seed + 20_000)
    paths = [out / "train.jsonl", out / "test.jsonl", out / "corpus.jsonl"]
    write_jsonl(paths[0], train)
    write_jsonl(paths[1], test)
    write_jsonl(paths[2], [{"text": t} for t in corpus])
    return [], paths


def _read_corpus(path: Path) -> list[str]:
    rows = read_jsonl(path)
    try:
        return [r["text"] for r in rows]
    except (KeyError, TypeError):
        raise CliError(f"{path}: corpus rows need a 'text' field") from None


def cmd_pretrain(args, cfg, out: Path):
    data = _need_file(args.dataset, "--dataset")
    corpus = _read_corpus(data)
    tc = _train_config(cfg, "pretrain", "continual-pretrain")
    if args.model:
        src = _need_file(args.model, "--model")
        model = _load_model(src).model
        inputs = [data, src]
    else:
        model = DenseTransformer(_model_config(cfg), seed=cfg["seed"])
        inputs = [data]
    if model.is_moe:
        raise CliError("pretrain expects a dense model")
    ckpt = continual_pretrain(model, corpus, tc, curve_path=out / "pretrain_curve.csv")
    path = save_checkpoint(out / "dense.ckpt", ckpt)
    return inputs, [path, out / "pretrain_curve.csv"]


def cmd_upcycle(args, cfg, out: Path):
    src = _need_file(args.model, "--model")
    dense = _load_model(src).model
    if dense.is_moe:
        raise CliError("upcycle expects a dense checkpoint")
    u = cfg["upcycle"]
    try:
        moe = upcycle_from_dense(dense, u["experts"], u["top_k"], seed=cfg["seed"], router_std=u["router_std"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return [src], [save_model(out / "moe.ckpt", moe)]


def cmd_moe_tune(args, cfg, out: Path):
    src = _need_file(args.model, "--model")
    data = _need_file(args.dataset, "--dataset")
    model = _load_model(src).model
    if not isinstance(model, MoETransformer):
        raise CliError("moe-tune expects an upcycled MoE checkpoint")
    if args.top_k is not None:
        model.set_active_experts(args.top_k)
    try:
        examples = load_examples(data)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    tc = _train_config(cfg, "moe_tune", "moe-tune")
    ckpt = moe_tune(model, examples, tc, curve_path=out / "moe_tune_curve.csv")
    path = save_checkpoint(out / "moe_tuned.ckpt", ckpt)
    return [src, data], [path, out / "moe_tune_curve.csv"]


def cmd_infer(args, cfg, out: Path):
    src = _need_file(args.model, "--model")
    data = _need_file(args.dataset, "--dataset")
    model = _load_model(src).model
    ic = cfg["infer"]
    records = infer(model, load_examples(data), n_votes=ic["n_votes"], max_new_tokens=ic["max_new_tokens"],
                    temperature=ic["temperature"], seed=cfg["seed"])
    path = out / "predictions.jsonl"
    write_jsonl(path, [r.to_dict() for r in records])
    return [src, data], [path]


def cmd_analyze_routing(args, cfg, out: Path):
    src = _need_file(args.model, "--model")
    data = _need_file(args.dataset, "--dataset")
    model = _load_model(src).model
    if not model.is_moe:
        raise CliError("analyze-routing expects an MoE checkpoint")
    ac = cfg["analysis"]
    layers = ac["layers"] or analytics.default_layers(model.config.n_layers)
    bad = [l for l in layers if not 0 <= l < model.config.n_layers]
    if bad:
        raise CliError(f"--layers out of range: {bad}")
    grouped = analytics.route_examples(model, load_examples(data), span=ac["span"])
    try:
        report = analytics.specialization_report(grouped, layers)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    all_traces = list(itertools.chain.from_iterable(grouped.values()))
    under = analytics.underutilized_experts(all_traces, ac["threshold"], layers)
    js, cs = out / "routing_report.json", out / "routing_report.csv"
    analytics.export_report(report, js, "json")
    analytics.export_report(report, cs, "csv")
    analytics.validate_report(json.loads(js.read_text()))
    summary = {
        "layers": layers,
        "distinct_primary_experts": {str(l): report.distinct_primaries(l) for l in layers},
        "mean_entropy": {str(l): report.mean_entropy(l) for l in layers},
        "underutilized": [list(x) for x in under],
    }
    sp = _write_json(out / "routing_summary.json", summary)
    return [src, data], [js, cs, sp]


def cmd_eval(args, cfg, out: Path):
    data = _need_file(args.dataset, "--dataset")
    try:
        ids, preds, gold = evaluation.load_predictions(data)
        report = evaluation.evaluation_report(ids, preds, gold)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    m = report["metrics"]
    print(f"accuracy={m['accuracy']:.4f} precision={m['precision']:.4f} recall={m['recall']:.4f} f1={m['f1']:.4f}")
    return [data], [_write_json(out / "metrics.json", report)]


def _ratings(args):
    data = _need_file(args.dataset, "--dataset")
    try:
        return data, evaluation.read_ratings_csv(data)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_kappa(args, cfg, out: Path):
    data, records = _ratings(args)
    by = {}
    for r in records:
        by.setdefault((r.dimension, r.rater_id), {})[r.item_id] = r.score
    raters = sorted({r.rater_id for r in records})
    result = {}
    for dim in evaluation.DIMENSIONS:
        for a, b in itertools.combinations(raters, 2):
            sa, sb = by.get((dim, a), {}), by.get((dim, b), {})
            items = sorted(set(sa) & set(sb))
            if not items:
                continue
            key = f"{dim}:{a}|{b}"
            try:
                k = evaluation.cohen_kappa([sa[i] for i in items], [sb[i] for i in items],
                                           categories=list(evaluation.LIKERT_SCORES))
                result[key] = k.to_dict()
                print(f"{key} kappa={k.kappa:.4f} ({k.band})")
            except evaluation.KappaUndefinedError as exc:
                result[key] = {"error": str(exc)}
    if not result:
        raise CliError("no rater pair shares rated items")
    return [data], [_write_json(out / "kappa.json", result)]


def cmd_likert(args, cfg, out: Path):
    data, records = _ratings(args)
    try:
        outcomes, queue = evaluation.likert_aggregate(records)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    dist = evaluation.rating_distribution(
        [evaluation.RatingRecord(o.item_id, "final", o.dimension, o.final) for o in outcomes])
    payload = {
        "outcomes": [o.__dict__ for o in outcomes],
        "third_rater_queue": queue,
        "distribution": dist.to_dict(),
    }
    for dim in evaluation.DIMENSIONS:
        if sum(dist.counts[dim]):
            print(f"{dim}: positive rate {100 * dist.positive_rate(dim):.2f}%")
    return [data], [_write_json(out / "likert.json", payload)]


def cmd_annotate(args, cfg, out: Path):
    data = _need_file(args.dataset, "--dataset")
    try:
        clients = annotation.build_clients(cfg["annotation"])
        _, report = annotation.run_pipeline(annotation.load_items(data), clients, out)
    except (ValueError, KeyError) as exc:
        raise CliError(f"annotate: {exc}") from None
    print(json.dumps(report.to_dict(), sort_keys=True))
    return [data], [out / "dataset.jsonl", out / "report.json"]


def cmd_param_count(args, cfg, out: Path):
    pc = cfg["param_count"]
    preset = pc["preset"]
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    try:
        mc = PRESETS[preset](total_experts=pc["experts"], active_experts=pc["top_k"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    total, active = count_parameters(mc)
    print(f"{preset} E={pc['experts']} k={pc['top_k']}: total={total} ({total / 1e9:.2f}B) "
          f"activated={active} ({active / 1e9:.2f}B)")
    payload = {"preset": preset, "experts": pc["experts"], "top_k": pc["top_k"],
               "total": total, "activated": active, "config": mc.to_dict()}
    return [], [_write_json(out / "param_count.json", payload)]


COMMANDS: dict[str, Callable] = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "upcycle": cmd_upcycle,
    "moe-tune": cmd_moe_tune,
    "infer": cmd_infer,
    "analyze-routing": cmd_analyze_routing,
    "eval": cmd_eval,
    "kappa": cmd_kappa,
    "likert": cmd_likert,
    "annotate": cmd_annotate,
    "param-count": cmd_param_count,
}


def _layers(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("--layers takes comma-separated integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".", help="output directory (created if missing)")
    common.add_argument("--model", help="input checkpoint")
    common.add_argument("--dataset", help="input data file")
    common.add_argument("--alpha", type=float, help="balance-loss weight for moe-tune")
    common.add_argument("--experts", type=int, help="total experts E")
    common.add_argument("--top-k", type=int, help="active experts k")
    common.add_argument("--n-votes", type=int, help="answers sampled per prompt")
    common.add_argument("--layers", type=_layers, help="comma-separated layer indices")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="moetune", description="Sparse expert tuning for contract auditing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = resolve_config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, cfg, out)
        missing = [str(p) for p in outputs if not Path(p).is_file()]
        if missing:
            raise CliError(f"expected outputs were not written: {missing}")
    except CliError as exc:
        print(f"moetune {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"moetune {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if argv is None else list(argv),
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "started": started,
        "finished": time.time(),
        "version": __version__,
    }
    _write_json(out / "run_manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
