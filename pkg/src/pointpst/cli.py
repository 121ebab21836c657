"""Command line entry point: ``pointpst {gen-data,pretrain,attack,run,report}``.

All commands share a work directory (``--out``)::

    data/      source.pcds test.pcds manifest.json
    model/     weights.pstw source_stats.npz pretrain.json manifest.json
    attacks/   <kind>.psta manifest.json
    runs/<name>/ metrics.json timeseries.csv log.jsonl manifest.json

Exit codes: 0 success, 2 validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks as at
from . import dataset as ds
from . import model as md
from . import stream as st
from .config import ConfigError, RunConfig
from .stats import GaussianStats

logger = logging.getLogger("pointpst")


class ArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fresh_dir(path: Path, overwrite: bool) -> Path:
    if path.exists():
        if not overwrite:
            raise ArtifactError(f"{path} exists; pass --overwrite or choose another --out")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_manifest(directory: Path, config: RunConfig, stage: str, extra: dict | None = None):
    files = {p.name: _sha(p) for p in sorted(directory.iterdir()) if p.name != "manifest.json"}
    manifest = {
        "stage": stage,
        "config_hash": config.hash(),
        "data_hash": config.data_hash(),
        "config": config.to_dict(),
        "files": files,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_manifest(directory: Path, stage: str) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise ArtifactError(f"missing {stage} artifacts in {directory}; run `pointpst {stage}` first")
    manifest = json.loads(path.read_text())
    for name, digest in manifest["files"].items():
        if _sha(directory / name) != digest:
            raise ArtifactError(f"{directory / name} was modified after it was written")
    return manifest


def _check_data(manifest: dict, config: RunConfig, what: str) -> None:
    if manifest["data_hash"] != config.data_hash():
        raise ArtifactError(f"{what} were produced from a different dataset configuration")


def _load_test(work: Path, config: RunConfig) -> ds.Dataset:
    _check_data(_read_manifest(work / "data", "gen-data"), config, "datasets")
    return ds.load_dataset(work / "data" / "test.pcds", split="test")


def _load_model(work: Path, config: RunConfig):
    manifest = _read_manifest(work / "model", "pretrain")
    _check_data(manifest, config, "model artifacts")
    weights = md.load_weights(work / "model" / "weights.pstw")
    stats = GaussianStats.load(work / "model" / "source_stats.npz")
    return weights, stats


def _load_cache(work: Path, config: RunConfig, kinds) -> dict[str, at.AdversarialBatch]:
    manifest = _read_manifest(work / "attacks", "attack")
    _check_data(manifest, config, "attack caches")
    cache = {}
    for kind in kinds:
        path = work / "attacks" / f"{kind}.psta"
        if not path.exists():
            raise ArtifactError(f"no cached {kind!r} attack in {work / 'attacks'}")
        cache[kind] = at.load_attack(path)
    return cache


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: RunConfig, work: Path, overwrite: bool) -> dict:
    out = _fresh_dir(work / "data", overwrite)
    source = ds.make_dataset(config.n_classes, config.train_per_class, config.n_points, config.seed, "source")
    test = ds.make_dataset(config.n_classes, config.test_per_class, config.n_points, config.seed, "test")
    ds.save_dataset(source, out / "source.pcds")
    ds.save_dataset(test, out / "test.pcds")
    _write_manifest(out, config, "gen-data", {"n_source": len(source), "n_test": len(test)})
    return {"n_source": len(source), "n_test": len(test)}


def cmd_pretrain(config: RunConfig, work: Path, overwrite: bool) -> dict:
    _check_data(_read_manifest(work / "data", "gen-data"), config, "datasets")
    source = ds.load_dataset(work / "data" / "source.pcds", split="source")
    test = ds.load_dataset(work / "data" / "test.pcds", split="test")
    out = _fresh_dir(work / "model", overwrite)
    t0 = time.time()
    weights = md.pretrain_source(
        source, config.classifier_config(), config.pretrain_epochs, config.pretrain_lr,
        config.pretrain_batch, config.seed, config.aug_spec(),
    )
    frozen = weights.frozen()
    stats = md.extract_source_stats(source, frozen)
    preds = md.predict(test.clouds(), frozen).argmax(axis=1)
    report = {
        "config_hash": config.hash(),
        "clean_test_acc": 100.0 * float(np.mean(preds == test.labels)),
        "test_predictions": preds.tolist(),
        "train_seconds": time.time() - t0,
    }
    md.save_weights(weights, out / "weights.pstw")
    stats.save(out / "source_stats.npz")
    (out / "pretrain.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out, config, "pretrain")
    return {"clean_test_acc": report["clean_test_acc"]}


def attack_indices(config: RunConfig, n_test: int) -> dict[str, np.ndarray]:
    """Union of the samples each attack kind needs across both stream protocols."""
    needed: dict[str, np.ndarray] = {}
    for protocol in ("single", "mixed"):
        spec = config.replace(protocol=protocol).stream_spec()
        for kind, idx in st.designated_indices(n_test, spec).items():
            needed[kind] = np.union1d(needed.get(kind, np.zeros(0, np.int64)), idx).astype(np.int64)
    return {k: needed.get(k, np.zeros(0, np.int64)) for k in config.attacks}


def cmd_attack(config: RunConfig, work: Path, overwrite: bool) -> dict:
    test = _load_test(work, config)
    weights, _ = _load_model(work, config)
    frozen = weights.frozen()
    before = frozen.checksum()
    out = _fresh_dir(work / "attacks", overwrite)
    indices = attack_indices(config, len(test))
    cache = at.build_attack_cache(test, frozen, config.attacks, indices, config.seed, config.attack_steps)
    if frozen.checksum() != before:
        raise RuntimeError("attack generation modified the frozen weights")
    summary = {}
    for kind, batch in cache.items():
        at.save_attack(batch, out / f"{kind}.psta")
        if len(batch):
            preds = md.predict(batch.perturbed, frozen).argmax(axis=1)
            summary[kind] = {"n": len(batch), "frozen_adv_acc": 100.0 * float(np.mean(preds == batch.labels))}
        else:
            summary[kind] = {"n": 0, "frozen_adv_acc": None}
    _write_manifest(out, config, "attack", {"summary": summary})
    return summary


ABLATION = (
    ("no_adaptation", {"mode": "frozen", "purifier": "identity"}),
    ("fixed_threshold", {"mode": "pst", "purifier": "identity", "lam": 0.0, "fixed_threshold": "ablation"}),
    ("adaptive", {"mode": "pst", "purifier": "identity", "lam": 0.0, "fixed_threshold": None}),
    ("adaptive_align", {"mode": "pst", "purifier": "identity", "fixed_threshold": None}),
    ("adaptive_align_purify", {"mode": "pst", "fixed_threshold": None}),
)


def ablation_configs(config: RunConfig) -> list[tuple[str, RunConfig]]:
    out = []
    for name, changes in ABLATION:
        changes = dict(changes)
        if changes.get("fixed_threshold") == "ablation":
            changes["fixed_threshold"] = config.ablation_fixed_threshold
        out.append((name, config.replace(**changes)))
    return out


def execute_run(config: RunConfig, test, weights, stats, cache, out: Path) -> st.MetricsRecord:
    stream = st.build_stream(test, cache, config.stream_spec())
    components = st.EvalComponents(
        weights.frozen(), config.purifier_kind(), config.aug_spec(), config.pst_config(), stats, config.seed
    )
    metrics, records = st.evaluate_stream(stream, config.mode, components)
    st.write_jsonl(records, out / "log.jsonl")
    st.write_time_series(metrics, out / "timeseries.csv")
    summary = {
        "config_hash": config.hash(),
        "data_hash": config.data_hash(),
        "mode": config.mode,
        "protocol": config.protocol,
        "purifier": config.purifier if config.mode != "frozen" else "identity",
        "n_batches": len(stream),
        **metrics.summary(),
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_manifest(out, config, "run")
    return metrics


def cmd_run(config: RunConfig, work: Path, overwrite: bool, name: str | None = None,
            ablation: bool = False) -> dict:
    spec = config.stream_spec()
    test = _load_test(work, config)
    weights, stats = _load_model(work, config)
    cache = _load_cache(work, config, spec.attack_kinds)
    if not ablation:
        out = _fresh_dir(work / "runs" / (name or f"{config.protocol}-{config.mode}"), overwrite)
        metrics = execute_run(config, test, weights, stats, cache, out)
        return metrics.summary()
    root = _fresh_dir(work / "runs" / (name or f"ablation-{config.protocol}"), overwrite)
    rows = []
    for variant, cfg in ablation_configs(config):
        out = root / variant
        out.mkdir()
        m = execute_run(cfg, test, weights, stats, cache, out)
        rows.append({"method": variant, "clean_acc": m.clean_acc, "adv_acc": m.adv_acc, "mixed_acc": m.mixed_acc})
    _write_table(rows, ["method", "clean_acc", "adv_acc", "mixed_acc"], root / "ablation")
    return {"ablation": rows}


def _write_table(rows: list[dict], columns: list[str], stem: Path) -> str:
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    text = format_table(rows, columns)
    stem.with_suffix(".txt").write_text(text + "\n")
    return text


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return "n/a" if np.isnan(v) else f"{v:.1f}"
        return str(v)

    cells = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_report(run_dirs: list[Path], out: Path | None = None) -> tuple[str, list[str]]:
    """Comparison table over finished runs; returns the table and any provenance warnings."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows, warnings, kinds = [], [], []
    data_hashes, protocols = set(), set()
    for d in run_dirs:
        manifest = _read_manifest(d, "run")
        metrics = json.loads((d / "metrics.json").read_text())
        if metrics["config_hash"] != manifest["config_hash"]:
            raise ArtifactError(f"{d}: metrics and manifest disagree on the config")
        data_hashes.add(metrics["data_hash"])
        protocols.add(metrics["protocol"])
        row = {"method": f"{d.name} ({metrics['mode']}/{metrics['purifier']})",
               "clean_acc": metrics["clean_acc"], "adv_acc": metrics["adv_acc"],
               "mixed_acc": metrics["mixed_acc"]}
        for kind, acc in metrics["adv_acc_by_kind"].items():
            row[f"adv_{kind}"] = acc
            if f"adv_{kind}" not in kinds:
                kinds.append(f"adv_{kind}")
        rows.append(row)
    if len(data_hashes) > 1:
        warnings.append("runs were produced from different datasets; rows are not comparable")
    if len(protocols) > 1:
        warnings.append(f"runs mix stream protocols: {sorted(protocols)}")
    columns = ["method", "clean_acc", "adv_acc", "mixed_acc", *kinds]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        text = _write_table(rows, columns, out / "report")
    else:
        text = format_table(rows, columns)
    return text, warnings


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointpst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="flat JSON run configuration")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out", type=Path, required=out_required, help="work directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    for name in ("gen-data", "pretrain", "attack"):
        common(sub.add_parser(name))
    run = sub.add_parser("run")
    common(run)
    run.add_argument("--mode", choices=("frozen", "purify", "pst"))
    run.add_argument("--protocol", choices=("single", "mixed"))
    run.add_argument("--name", help="run directory name under <out>/runs")
    run.add_argument("--ablation", action="store_true",
                     help="run the five-way ablation and write a comparison table")
    report = sub.add_parser("report")
    report.add_argument("runs", nargs="+", type=Path)
    report.add_argument("--out", type=Path, help="directory for report.txt / report.csv")
    return parser


def _config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["mode"] = "purify_only" if args.mode == "purify" else args.mode
    if getattr(args, "protocol", None):
        changes["protocol"] = args.protocol
    return config.replace(**changes) if changes else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            text, warnings = cmd_report(args.runs, args.out)
            for w in warnings:
                print(f"warning: {w}", file=sys.stderr)
            print(text)
            return 0
        config = _config(args)
        work = args.out
        if args.command == "gen-data":
            result = cmd_gen_data(config, work, args.overwrite)
        elif args.command == "pretrain":
            result = cmd_pretrain(config, work, args.overwrite)
        elif args.command == "attack":
            result = cmd_attack(config, work, args.overwrite)
        else:
            result = cmd_run(config, work, args.overwrite, args.name, args.ablation)
        print(json.dumps(result, indent=2))
        return 0
    except (ConfigError, ds.ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArtifactError, ds.FormatError, st.MissingCacheError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
