"""Command-line entry point: ``daml <command> [options]``.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
Relative ``--out`` paths are resolved under ``$DAML_HOME`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, from_mapping, parse_kv_file
from .corpus import (SOURCE, SPLIT_NAMES, TARGET, SynthSpec, Vocab, encode_docs, gen_synthetic,
                     parse_corpus, read_raw, write_synthetic)
from .metrics import (evaluate, export_features, format_table, mean_rows, metrics_from_predictions,
                      write_report_csv)
from .trainer import (SINGLE, Checkpoint, TrainConfig, TrainingError, ensemble_labels, fit, predict_labels,
                      restore_groups, select_model)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
HOME_ENV = "DAML_HOME"
REQUIRED_SPLITS = ("source_train", "source_dev", "target_train")
CKPT_NAME = "checkpoint.ckpt"
LOG_NAME = "train_log.jsonl"
CURVE_COLUMNS = ("variant", "seed", "step", "group", "source_dev_acc", "target_dev_acc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers ----------------------------------------------------------------


def out_dir(path: str | None, default: str) -> Path:
    home = os.environ.get(HOME_ENV)
    p = Path(path or default)
    if home and not p.is_absolute():
        p = Path(home) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def csv_list(text: str, cast=str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def load_config(path: str | None, **overrides) -> TrainConfig:
    mapping = parse_kv_file(path) if path else {}
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(TrainConfig, mapping)


def load_data(data_dir, cfg: TrainConfig) -> tuple[dict, Vocab, dict]:
    """Read ``<split>.tsv`` files; returns (splits, vocab, input digests)."""
    data_dir = Path(data_dir)
    paths = {n: data_dir / f"{n}.tsv" for n in SPLIT_NAMES if (data_dir / f"{n}.tsv").exists()}
    missing = [n for n in REQUIRED_SPLITS if n not in paths]
    if missing:
        raise UsageError(f"{data_dir}: missing corpus file(s) {', '.join(n + '.tsv' for n in missing)}")
    try:
        raw = {n: read_raw(p, cfg.num_labels) for n, p in paths.items()}
    except ValueError as e:
        raise UsageError(str(e)) from None
    vocab = Vocab.build(raw["source_train"] + raw["target_train"], cfg.min_count)
    splits = {n: encode_docs(r, vocab, SOURCE if n.startswith("source") else TARGET, f"{n}:")
              for n, r in raw.items()}
    return splits, vocab, {p.name: digest(p) for p in paths.values()}


def curve_rows(history: list, variant: str = "", seed="") -> list[dict]:
    rows = []
    for h in history:
        for gid, m in h["groups"].items():
            rows.append({"variant": variant, "seed": seed, "step": h["step"], "group": gid,
                         "source_dev_acc": m.get("source_dev_acc", ""),
                         "target_dev_acc": m.get("target_dev_acc", "")})
    return rows


def split_metrics(ckpt: Checkpoint, groups, docs, ensemble: bool):
    cfg = ckpt.train_config()
    if ensemble:
        return evaluate(lambda ds: ensemble_labels(groups, ds, cfg.eval_batch), docs, cfg.num_labels)
    g = groups[select_model(ckpt) - 1]
    return evaluate(lambda ds: predict_labels(g, ds, cfg.eval_batch), docs, cfg.num_labels)


def train_run(cfg: TrainConfig, data_dir, run_dir: Path, quiet: bool = False) -> dict:
    """fit() plus artifacts: checkpoint, JSONL log, curves CSV and manifest."""
    start = time.time()
    splits, vocab, inputs = load_data(data_dir, cfg)
    log_path = run_dir / LOG_NAME
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def log(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            if not quiet:
                best = max(v["source_dev_acc"] for v in entry["groups"].values())
                print(f"step {entry['step']:6d}  source-dev acc {best:.4f}"
                      + ("  *" if entry["checkpoint"] else ""), flush=True)

        result = fit(cfg, splits, vocab, log)
    ckpt = result.checkpoint
    ckpt.save(run_dir / CKPT_NAME)
    curves = run_dir / "curves.csv"
    write_report_csv(curve_rows(result.history, cfg.variant, cfg.seed), curves, CURVE_COLUMNS)

    groups = restore_groups(ckpt)
    metrics = {"selected_group": select_model(ckpt), "checkpoint_step": ckpt.step,
               "steps": result.steps, "source_dev": ckpt.metrics}
    ensemble = cfg.variant == "ne"
    for split in ("source_test", "target_test"):
        docs = splits.get(split)
        if docs and all(d.label is not None for d in docs):
            m = split_metrics(ckpt, groups, docs, ensemble)
            metrics[split] = {"acc": m.accuracy, "rmse": m.rmse, "count": m.count}
    manifest = {
        "command": "train", "config": cfg.as_dict(), "config_hash": ckpt.config_hash,
        "inputs": inputs, "data": str(data_dir),
        "outputs": {"checkpoint": CKPT_NAME, "log": LOG_NAME, "curves": curves.name},
        "wall_clock_s": round(time.time() - start, 3), "metrics": metrics,
    }
    write_json_atomic(run_dir / "manifest.json", manifest)
    return manifest


def _job(args: tuple) -> dict:
    cfg_dict, data_dir, run_dir, task = args
    cfg = TrainConfig(**cfg_dict)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        manifest = train_run(cfg, data_dir, run_dir, quiet=True)
    except Exception as e:  # recorded; the caller exits nonzero at the end
        return {"run": run_dir.name, "variant": cfg.variant, "seed": cfg.seed, "config": cfg_dict,
                "error": f"{type(e).__name__}: {e}", "trace": traceback.format_exc()}
    rows = []
    for split in ("target_test", "source_test"):
        if split in manifest["metrics"]:
            m = manifest["metrics"][split]
            rows.append({"task": task, "variant": cfg.variant, "seed": cfg.seed, "split": split,
                         "acc": m["acc"], "rmse": m["rmse"]})
    curves = list(csv.DictReader(open(run_dir / "curves.csv", encoding="utf-8")))
    return {"run": run_dir.name, "variant": cfg.variant, "seed": cfg.seed, "config": cfg_dict, "rows": rows, "curves": curves,
            "wall_clock_s": manifest["wall_clock_s"]}


def run_jobs(jobs: list[tuple], workers: int, echo: bool = True) -> list[dict]:
    """Each job owns its run directory; workers > 1 uses separate processes."""
    if workers <= 1:
        results = []
        for j in jobs:
            r = _job(j)
            if echo:
                _echo_job(r)
            results.append(r)
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_job, jobs))
    if echo:
        for r in results:
            _echo_job(r)
    return results


def _echo_job(r: dict) -> None:
    label = r["run"]
    if "error" in r:
        print(f"FAILED {label}: {r['error']}", file=sys.stderr, flush=True)
        return
    accs = ", ".join(f"{row['split']} acc {row['acc']:.4f}" for row in r["rows"])
    print(f"done {label} ({r['wall_clock_s']:.0f}s): {accs}", flush=True)


def _task_name(args) -> str:
    return args.task or Path(args.data).resolve().name


def _base_overrides(args) -> dict:
    return {"variant": getattr(args, "variant", None), "seed": getattr(args, "seed", None)}


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    mapping = parse_kv_file(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = args.seed
    spec = from_mapping(SynthSpec, mapping)
    dest = out_dir(args.out, "data/synthetic")
    paths = write_synthetic(gen_synthetic(spec), dest)
    counts = {}
    for name, p in paths.items():
        if name != "lexicons":
            counts[p.name] = sum(1 for _ in open(p, encoding="utf-8"))
    write_json_atomic(dest / "manifest.json", {
        "command": "gen-data", "spec": asdict(spec),
        "outputs": {p.name: digest(p) for p in paths.values()}, "rows": counts,
    })
    for name, n in counts.items():
        print(f"{dest / name}: {n} documents")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, **_base_overrides(args))
    load_data(args.data, cfg)  # fail on bad inputs before any training
    dest = out_dir(args.out, f"runs/{cfg.variant}-s{cfg.seed}")
    manifest = train_run(cfg, args.data, dest, quiet=args.quiet)
    m = manifest["metrics"]
    print(f"checkpoint {dest / CKPT_NAME} (step {m['checkpoint_step']}, group {m['selected_group']})")
    for split in ("source_test", "target_test"):
        if split in m:
            print(f"{split}: acc {m[split]['acc']:.4f}  rmse {m[split]['rmse']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.train_config()
    if args.ensemble and len(ckpt.group_ids()) < 2:
        raise UsageError("--ensemble needs a checkpoint with at least 2 groups "
                         f"(this one has {len(ckpt.group_ids())})")
    name = Path(args.corpus).name
    domain = {"source": SOURCE, "target": TARGET}.get(args.domain) if args.domain else (
        TARGET if name.startswith("target") else SOURCE)
    try:
        docs, _ = parse_corpus(args.corpus, Vocab(ckpt.vocab), domain=domain, num_labels=cfg.num_labels)
    except ValueError as e:
        raise UsageError(str(e)) from None
    groups = restore_groups(ckpt)
    if args.export_features:
        n = export_features(groups, docs, args.export_features, cfg.eval_batch)
        print(f"wrote {n} feature rows to {args.export_features}")
    unlabeled = sum(d.label is None for d in docs)
    if unlabeled:
        if args.export_features:
            return EXIT_OK
        raise UsageError(f"{args.corpus}: {unlabeled} unlabeled document(s); evaluation needs labels")
    if args.source_dev:
        dev, _ = parse_corpus(args.source_dev, Vocab(ckpt.vocab), domain=SOURCE, num_labels=cfg.num_labels)
        gid = select_model(ckpt, dev)
    else:
        gid = select_model(ckpt)
    if args.ensemble:
        m = evaluate(lambda ds: ensemble_labels(groups, ds, cfg.eval_batch), docs, cfg.num_labels)
        who = "ensemble"
    else:
        g = groups[gid - 1]
        m = evaluate(lambda ds: predict_labels(g, ds, cfg.eval_batch), docs, cfg.num_labels)
        who = f"group {gid}"
    row = {"task": args.task or "eval", "variant": cfg.variant, "seed": cfg.seed,
           "split": Path(args.corpus).stem, "acc": m.accuracy, "rmse": m.rmse}
    print(f"{who}: {m.count} documents")
    print(format_table([row]), end="")
    if args.out:
        write_report_csv([row], args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    variants = csv_list(args.variants)
    seeds = csv_list(args.seeds, int)
    if not variants or not seeds:
        raise UsageError("--variants and --seeds must be non-empty")
    base = load_config(args.config)
    load_data(args.data, base)
    dest = out_dir(args.out, "runs/compare")
    task = _task_name(args)
    jobs = []
    for seed in seeds:
        for v in variants:
            d = base.as_dict()
            d.update(variant=v, seed=seed, num_groups=1 if v in SINGLE else max(base.num_groups, 2))
            cfg = TrainConfig(**d)  # validates before any job starts
            jobs.append((cfg.as_dict(), str(args.data), str(dest / f"{v}-s{seed}"), task))
    results = run_jobs(jobs, args.jobs)
    return _write_comparison(dest, results, "compare")


def _write_comparison(dest: Path, results: list[dict], stem: str) -> int:
    rows = [r for res in results if "error" not in res for r in res["rows"]]
    write_report_csv(rows + mean_rows(rows), dest / f"{stem}.csv")
    curves = [c for res in results if "error" not in res for c in res["curves"]]
    write_report_csv(curves, dest / "curves.csv", CURVE_COLUMNS)
    table = format_table(rows + mean_rows(rows))
    (dest / f"{stem}.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    failures = [{k: res[k] for k in ("run", "variant", "seed", "error", "trace")} for res in results if "error" in res]
    write_json_atomic(dest / "manifest.json", {
        "command": stem, "runs": [{k: v for k, v in res.items() if k not in ("curves", "trace")}
                                  for res in results],
        "failures": failures, "outputs": [f"{stem}.csv", f"{stem}.txt", "curves.csv"],
    })
    if failures:
        print(f"{len(failures)} run(s) failed; see {dest / 'manifest.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate_prober(args) -> int:
    seeds = csv_list(args.seeds, int)
    base = load_config(args.config, variant="daml")
    load_data(args.data, base)
    dest = out_dir(args.out, "runs/prober")
    task = _task_name(args)
    domains = ("target", "source", "both")
    jobs = []
    for seed in seeds:
        for pd in domains:
            d = base.as_dict()
            d.update(seed=seed, prober_domain=pd)
            jobs.append((d, str(args.data), str(dest / f"{pd}-s{seed}"), task))
    results = run_jobs(jobs, args.jobs)
    table: dict = {}
    for res in results:
        if "error" in res:
            continue
        acc = next((r["acc"] for r in res["rows"] if r["split"] == "target_test"), "")
        table.setdefault(res["seed"], {})[res["config"]["prober_domain"]] = acc
    rows = [{"task": task, "seed": s, **table[s]} for s in sorted(table)]
    if rows:
        mean = {"task": task, "seed": "mean"}
        for pd in domains:
            vals = [r[pd] for r in rows if r.get(pd, "") != ""]
            mean[pd] = sum(vals) / len(vals) if vals else ""
        rows.append(mean)
    write_report_csv(rows, dest / "prober_ablation.csv", ("task", "seed") + domains)
    print(format_table(rows, ("task", "seed") + domains), end="")
    failed = [res for res in results if "error" in res]
    for res in failed:
        print(f"FAILED prober={res['config']['prober_domain']} seed={res['seed']}: {res['error']}",
              file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_sweep(args) -> int:
    if args.param not in ("eta", "lambda_d", "lambda_m"):
        raise UsageError("--param must be eta, lambda_d or lambda_m")
    values = csv_list(args.values, float)
    seeds = csv_list(args.seeds, int)
    base = load_config(args.config, **_base_overrides(args))
    load_data(args.data, base)
    dest = out_dir(args.out, f"runs/sweep-{args.param}")
    task = _task_name(args)
    jobs = []
    for seed in seeds:
        for v in values:
            d = base.as_dict()
            d.update(seed=seed, **{args.param: v})
            jobs.append((d, str(args.data), str(dest / f"{args.param}={v:g}-s{seed}"), task))
    results = run_jobs(jobs, args.jobs)
    rows = []
    for res in results:
        for r in res.get("rows", []):
            if r["split"] == "target_test":
                rows.append({"param": args.param, "value": res["config"][args.param], "seed": res["seed"],
                             "acc": r["acc"], "rmse": r["rmse"]})
    cols = ("param", "value", "seed", "acc", "rmse")
    write_report_csv(rows, dest / "sweep.csv", cols)
    print(format_table(rows, cols), end="")
    return EXIT_RUNTIME if any("error" in r for r in results) else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_objective, check_ops

    start = time.time()
    variants = csv_list(args.variants)
    with ad.inject_grl_sign_bug() if args.inject_grl_bug else _null():
        results = check_ops(args.tolerance)
        for v in variants:
            results += check_objective(v, args.tolerance, vocab=args.vocab, dim=args.dim)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} max rel err {r.worst:.3e} ({r.worst_param})")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed at tolerance {args.tolerance:g} "
          f"in {time.time() - start:.1f}s")
    if failed:
        worst = max(failed, key=lambda r: r.worst)
        print(f"worst offender: {worst.name} {worst.worst_param} ({worst.worst:.3e})", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="daml", description="Adversarial mutual learning for cross-domain sentiment rating.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic two-domain corpus")
    g.add_argument("--config", help="key=value SynthSpec file")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    def training_flags(sp, variant=True):
        sp.add_argument("--config", help="key=value TrainConfig file")
        sp.add_argument("--data", required=True, help="directory holding <split>.tsv files")
        sp.add_argument("--out")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--task", help="task name for reports (default: data directory name)")
        if variant:
            sp.add_argument("--variant")

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--domain", choices=("source", "target"))
    e.add_argument("--source-dev", help="re-select the group on this source dev corpus")
    e.add_argument("--ensemble", action="store_true", help="sum the groups' distributions")
    e.add_argument("--export-features", metavar="PATH")
    e.add_argument("--out", help="write the metrics row as CSV")
    e.add_argument("--task")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train variants x seeds and tabulate target-test results")
    training_flags(c, variant=False)
    c.add_argument("--variants", default="naive,dann,daml")
    c.add_argument("--seeds", default="0,1,2")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("ablate-prober", help="daml with the prober on target, source or both")
    training_flags(a, variant=False)
    a.add_argument("--seeds", default="0")
    a.set_defaults(func=cmd_ablate_prober)

    s = sub.add_parser("sweep", help="vary eta, lambda_d or lambda_m")
    training_flags(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", default="0")
    s.set_defaults(func=cmd_sweep)

    k = sub.add_parser("gradcheck", help="finite-difference check of ops and the full objective")
    k.add_argument("--tolerance", type=float, default=1e-4)
    k.add_argument("--variants", default="daml")
    k.add_argument("--vocab", type=int, default=10)
    k.add_argument("--dim", type=int, default=3)
    k.add_argument("--inject-grl-bug", action="store_true", help="test mode: flip the reversal sign")
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ad.NumericError, RuntimeError, ValueError, OSError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
