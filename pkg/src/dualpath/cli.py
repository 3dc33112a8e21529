"""Command-line entry point: corpus generation, degradation, training,
evaluation, ablation sweeps, similarity maps, and report aggregation.

Every subcommand writes a resolved-config echo (flat ``key: value``
lines) into its output directory, so any run can be replayed exactly.
Config files use the same flat format; ``--set key=value`` overrides
individual keys. RVRAG_SEED serves as a master-seed fallback.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, gen_corpus, load_image
from .degrade import degrade_corpus
from .errors import (CheckpointFormatError, ConfigError, ManifestError, NonFiniteError)
from .retrieval import (embed_corpus, file_digest, mrr_at_k, recall_at_k,
                        retrieve_topk, silhouette, similarity_map)
from .trainer import (TrainConfig, config_from_flat, config_to_flat, evaluate,
                      load_checkpoint, train, _embed_rows, _positives_for_index)

ABLATION_GRID = [
    ("baseline", {"disable_nc_token": True, "disable_ncdm": True, "disable_csa": True}),
    ("wo_u", {"nc_bidirectional": True}),
    ("wo_ncdm", {"disable_ncdm": True}),
    ("wo_csa", {"disable_csa": True}),
    ("wo_both", {"disable_ncdm": True, "disable_csa": True}),
    ("full", {}),
]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _master_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RVRAG_SEED")
    if env is not None:
        return int(env)
    return 0


def _read_config_file(path) -> dict:
    flat = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key: value'")
        key, value = line.split(":", 1)
        flat[key.strip()] = value.strip()
    return flat


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_train_config(args) -> TrainConfig:
    flat = {}
    if args.config:
        flat.update(_read_config_file(args.config))
    if args.seed is not None:
        flat["master_seed"] = args.seed
    elif "master_seed" not in flat and os.environ.get("RVRAG_SEED") is not None:
        flat["master_seed"] = int(os.environ["RVRAG_SEED"])
    flat.update(_parse_overrides(args.set))
    return config_from_flat(flat)


def _write_echo(out_dir: Path, entries: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}: {entries[k]}" for k in sorted(entries)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _echo_config(config: TrainConfig, extra: dict) -> dict:
    entries = {k: v for k, v in config_to_flat(config).items()}
    entries.update(extra)
    return entries


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_corpus(args) -> int:
    seed = _master_seed(args)
    out = Path(args.out)
    manifest = gen_corpus(args.classes, args.per_class, seed, out,
                          test_fraction=args.test_fraction)
    _write_echo(out, {"subcommand": "gen-corpus", "classes": args.classes,
                      "per_class": args.per_class, "seed": seed,
                      "test_fraction": args.test_fraction, "out": str(out)})
    print(f"wrote {len(manifest.docs)} documents and {len(manifest.queries)} "
          f"queries under {out}")
    return 0


def _cmd_degrade(args) -> int:
    seed = _master_seed(args)
    manifest = CorpusManifest.load(args.manifest)
    before = len(manifest.docs)
    manifest = degrade_corpus(manifest, seed)
    _write_echo(Path(args.manifest).parent,
                {"subcommand": "degrade", "manifest": str(args.manifest), "seed": seed})
    print(f"added {len(manifest.docs) - before} degraded variants")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_train_config(args)
    manifest = CorpusManifest.load(args.manifest)
    out = Path(args.out)
    _write_echo(out, _echo_config(config, {"subcommand": "train",
                                           "manifest": str(args.manifest),
                                           "out": str(out)}))
    ckpt, metrics_path = train(config, manifest, out)
    print(f"trained {ckpt.step} steps; checkpoint and {metrics_path.name} in {out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_id = file_digest(args.checkpoint)
    man_id = file_digest(args.manifest)
    queries = [q for q in manifest.queries if q.split == args.split]
    if not queries:
        raise ManifestError(f"no {args.split!r} queries in manifest")

    rows = []
    for mode in ("clean", "degraded"):
        index = embed_corpus(ckpt.weights, manifest, mode, split=args.split,
                             checkpoint_id=ckpt_id, manifest_id=man_id)
        if len(index) == 0:
            continue
        ids = set(index.doc_ids)
        ranked, qrecs = [], []
        for q in queries:
            pos = _positives_for_index(manifest, q, ids)
            if not pos:
                continue
            ranked.append(retrieve_topk(index, ckpt.query_table[q.class_id], args.k,
                                        query_id=q.query_id))
            qrecs.append((q.query_id, pos))
        sil = math.nan
        if mode == "degraded" and ckpt.weights.config.nc_enabled:
            recs = [r for r in manifest.docs if r.is_degraded and r.split == args.split]
            _, deg = _embed_rows(ckpt.weights, manifest, recs, want_zdeg=True)
            fams = [r.degradation_family for r in recs]
            uniq, counts = np.unique(fams, return_counts=True)
            if len(uniq) >= 2 and counts.min() >= 2:
                sil = silhouette(deg.astype(np.float64), fams)
        rows.append({"mode": mode, "n_queries": len(ranked),
                     "mrr10": mrr_at_k(ranked, qrecs, k=args.k),
                     "recall10": recall_at_k(ranked, qrecs, k=args.k),
                     "silhouette_zdeg": sil})
        index.save(out / f"index_{mode}.rvix")

    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["mode", "n_queries", "mrr10", "recall10",
                                          "silhouette_zdeg"])
        w.writeheader()
        w.writerows(rows)
    _write_echo(out, {"subcommand": "eval", "checkpoint": str(args.checkpoint),
                      "manifest": str(args.manifest), "split": args.split, "k": args.k,
                      "checkpoint_id": ckpt_id, "manifest_id": man_id})
    for r in rows:
        print(f"{r['mode']:9s} mrr10={r['mrr10']:.4f} recall10={r['recall10']:.4f} "
              f"silhouette={r['silhouette_zdeg']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    base = _resolve_train_config(args)
    manifest = CorpusManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for label, flags in ABLATION_GRID:
        for s in range(args.seeds):
            flat = config_to_flat(base)
            flat.update(flags)
            flat["master_seed"] = base.master_seed + s
            config = config_from_flat(flat)
            run_dir = out / "runs" / f"{label}_s{s}"
            ckpt, _ = train(config, manifest, run_dir)
            m = evaluate(ckpt.weights, ckpt.query_table, manifest)
            rows.append({"config": label, "seed": config.master_seed,
                         "mrr10_clean": m["mrr10_clean"], "mrr10_deg": m["mrr10_deg"],
                         "silhouette_zdeg": m["silhouette_zdeg"]})
            print(f"{label:9s} seed={config.master_seed} "
                  f"clean={m['mrr10_clean']:.4f} deg={m['mrr10_deg']:.4f} "
                  f"sil={m['silhouette_zdeg']:.4f}")

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["config", "seed", "mrr10_clean",
                                          "mrr10_deg", "silhouette_zdeg"])
        w.writeheader()
        w.writerows(rows)
    _write_echo(out, _echo_config(base, {"subcommand": "ablate", "seeds": args.seeds,
                                         "manifest": str(args.manifest),
                                         "out": str(out)}))
    _summarize_ablation(out / "ablation.csv", out / "ablation_summary.csv")
    return 0


def _summarize_ablation(ablation_csv: Path, out_csv: Path) -> list[dict]:
    with open(ablation_csv, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ManifestError(f"{ablation_csv}: no rows to summarize")
    by_config: dict[str, list[dict]] = {}
    for r in rows:
        by_config.setdefault(r["config"], []).append(r)

    def fmean(items, key):
        vals = [float(r[key]) for r in items]
        return sum(vals) / len(vals)

    summary = []
    for label, items in by_config.items():
        summary.append({"config": label, "runs": len(items),
                        "mrr10_clean": fmean(items, "mrr10_clean"),
                        "mrr10_deg": fmean(items, "mrr10_deg"),
                        "silhouette_zdeg": fmean(items, "silhouette_zdeg")})
    base = next((s for s in summary if s["config"] == "baseline"), None)
    for s in summary:
        s["delta_deg_vs_baseline"] = (s["mrr10_deg"] - base["mrr10_deg"]) if base else math.nan
        s["delta_clean_vs_baseline"] = (s["mrr10_clean"] - base["mrr10_clean"]) if base else math.nan
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["config", "runs", "mrr10_clean", "mrr10_deg",
                                          "silhouette_zdeg", "delta_clean_vs_baseline",
                                          "delta_deg_vs_baseline"])
        w.writeheader()
        w.writerows(summary)
    return summary


def _cmd_simmap(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    by_id = manifest.by_id()
    if args.doc not in by_id:
        raise ManifestError(f"doc id {args.doc!r} not in manifest")
    rec = by_id[args.doc]
    img = load_image(manifest, rec)
    q = ckpt.query_table[args.query_class]
    q = q / np.linalg.norm(q)
    grid = similarity_map(ckpt.weights, img.pixels, q)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"simmap_{args.doc}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        for row in grid:
            w.writerow([f"{v:.6f}" for v in row])
    _write_echo(out, {"subcommand": "simmap", "checkpoint": str(args.checkpoint),
                      "manifest": str(args.manifest), "doc": args.doc,
                      "query_class": args.query_class})
    print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = _summarize_ablation(Path(args.ablation), out / "summary.csv")
    width = max(len(s["config"]) for s in summary)
    print(f"{'config':<{width}}  runs  mrr10_clean  mrr10_deg  d_clean  d_deg")
    for s in sorted(summary, key=lambda r: r["mrr10_deg"], reverse=True):
        print(f"{s['config']:<{width}}  {s['runs']:4d}  {s['mrr10_clean']:11.4f}  "
              f"{s['mrr10_deg']:9.4f}  {s['delta_clean_vs_baseline']:+7.4f}  "
              f"{s['delta_deg_vs_baseline']:+6.4f}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualpath", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-corpus", help="generate a labeled toy document corpus")
    p.add_argument("--classes", type=int, default=16)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("degrade", help="add one degraded variant per clean document")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_degrade)

    for name, fn in (("train", _cmd_train), ("ablate", _cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} with flat config + overrides")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None, help="flat key: value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "ablate":
            p.add_argument("--seeds", type=int, default=3)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("simmap", help="query-to-patch similarity grid as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--doc", required=True)
    p.add_argument("--query-class", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_simmap)

    p = sub.add_parser("report", help="aggregate an ablation CSV into a summary table")
    p.add_argument("--ablation", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (_UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
