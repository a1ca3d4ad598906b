"""``pmetlab`` command line: gen-corpus, train, edit, eval, analyze, ablate.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Config files are flat ``key = value`` text; explicit flags win over them.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os
import sys

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("PMETLAB_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .analysis import delta_norm_comparison, similarity_profile  # noqa: E402
from .corpus import (  # noqa: E402
    CorpusConfig, edit_requests, generate_corpus, load_jsonl, load_texts, load_vocab, save_jsonl,
    save_texts, save_vocab,
)
from .editor import (  # noqa: E402
    EditConfig, EditError, EditReport, apply_edits, config_echo, config_from_mapping, parse_config_text,
)
from .evaluation import CSV_HEADER, EvalConfig, evaluate_all  # noqa: E402
from .model import ModelConfig, Vocab, init_model, load_checkpoint, save_checkpoint  # noqa: E402
from .trainer import TrainConfig, TrainingDivergedError, train, write_history_csv  # noqa: E402

log = logging.getLogger("pmetlab")

ABLATION_MODES = {
    "pmet": {},
    "no_delta_a": {"optimize_delta_a": False},
    "edit_mhsa": {"update_mhsa_weights": True},
    "even_spread": {"spread_mode": "even"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(path, force: bool = True) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, args, inputs: dict, outputs: list, seeds: dict, config=None):
    man = {
        "command": command,
        "version": __version__,
        "argv": [str(x) for x in getattr(args, "_argv", [])],
        "config_file": getattr(args, "config", None),
        "config": config,
        "seeds": seeds,
        "inputs": {k: {"path": str(v), "sha256": file_hash(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(p.name): file_hash(p) for p in outputs},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_config(path) -> dict[str, str]:
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    try:
        return parse_config_text(text)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _build(cls, mapping, flags: dict, aliases=None):
    """Dataclass from config-file strings overridden by non-None flag values."""
    names = {f.name for f in fields(cls)}
    aliases = aliases or {}
    own = {k: v for k, v in mapping.items() if aliases.get(k, k) in names}
    try:
        cfg = config_from_mapping(cls, own, aliases)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    for k, v in flags.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def _check_keys(mapping, *classes, aliases=None):
    known = {f.name for c in classes for f in fields(c)} | set(aliases or {})
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def _layers(text):
    try:
        return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None


def _names(text):
    if text.strip().lower() == "none":
        return ()
    return tuple(x for x in text.replace(",", " ").split())


def _seeds(text):
    try:
        out = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _data_files(data: Path):
    files = {"records": data / "records.jsonl", "vocab": data / "vocab.txt", "texts": data / "train.txt"}
    for name, p in files.items():
        if not p.exists():
            raise UsageError(f"dataset directory {data} lacks {p.name}")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    mapping = _read_config(args.config)
    _check_keys(mapping, CorpusConfig)
    cfg = _build(CorpusConfig, mapping, {
        "seed": args.seed, "n_subjects": args.subjects, "n_relations": args.relations,
        "paraphrases_per_fact": args.paraphrases, "neighbors_per_fact": args.neighbors,
        "objects_per_relation": args.objects,
    })
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records, vocab, texts = generate_corpus(cfg)
    out = _out_dir(args.out)
    paths = [out / "records.jsonl", out / "vocab.txt", out / "train.txt"]
    save_jsonl(records, paths[0])
    save_vocab(vocab, paths[1])
    save_texts(texts, paths[2])
    write_manifest(out, "gen-corpus", args, {}, paths, {"corpus": cfg.seed}, asdict(cfg))
    print(f"wrote {len(records)} records, {len(vocab)} tokens, {len(texts)} texts to {out}")
    return 0


def cmd_train(args) -> int:
    mapping = _read_config(args.config)
    _check_keys(mapping, ModelConfig, TrainConfig)
    data = Path(args.data)
    files = _data_files(data)
    out = Path(args.out)
    ckpt = out / "model.ckpt"
    if ckpt.exists() and not args.force:
        raise UsageError(f"{ckpt} exists; pass --force to overwrite")
    mcfg = _build(ModelConfig, mapping, {
        "n_layers": args.layers, "d_model": args.d_model, "d_ff": args.d_ff, "n_heads": args.heads,
        "seed": args.seed,
    })
    tcfg = _build(TrainConfig, mapping, {
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr, "seed": args.seed,
        "target_memorization": args.target, "frozen": args.freeze,
    })
    vocab = Vocab(load_vocab(files["vocab"]))
    mcfg.vocab_size = len(vocab)
    try:
        mcfg.validate()
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = load_jsonl(files["records"])
    texts = load_texts(files["texts"])
    out = _out_dir(out)
    model = init_model(mcfg, vocab)
    try:
        model, history = train(model, texts, tcfg, records=records)
    except TrainingDivergedError:
        ckpt.unlink(missing_ok=True)
        raise
    save_checkpoint(model, ckpt)
    write_history_csv(history, out / "history.csv")
    write_manifest(out, "train", args, files, [ckpt, out / "history.csv"], {"model": mcfg.seed, "train": tcfg.seed},
                   {"model": asdict(mcfg), "train": asdict(tcfg)})
    last = history[-1] if history else (0, float("nan"), float("nan"))
    print(f"trained {last[0]} epochs, final nll {last[1]:.4f}, memorization {last[2]:.3f}")
    return 0


def _edit_config(args, mapping) -> EditConfig:
    _check_keys(mapping, EditConfig, aliases={"lambda": 1, "spread": 1})
    cfg = _build(EditConfig, mapping, {
        "critical_layers": args.critical_layers, "lam": args.lam, "spread_mode": args.spread,
        "opt_steps": args.steps, "opt_lr": args.opt_lr, "n_prefixes": args.prefixes, "seed": args.seed,
        "optimize_delta_a": False if args.no_delta_a else None,
        "update_mhsa_weights": True if args.edit_mhsa else None,
    }, aliases={"lambda": "lam", "spread": "spread_mode"})
    return cfg


def _requests(args, files):
    if args.requests_file:
        return load_jsonl(args.requests_file)
    records = load_jsonl(files["records"])
    try:
        return edit_requests(records, args.n_requests, seed=args.request_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_edit(args) -> int:
    mapping = _read_config(args.config)
    cfg = _edit_config(args, mapping)
    model = load_checkpoint(args.model)
    try:
        cfg.validate(model.config.n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    files = _data_files(Path(args.data))
    requests = _requests(args, files)
    texts = load_texts(files["texts"])
    out = _out_dir(args.out)
    edited, report = apply_edits(model, requests, cfg, sample_texts=texts)
    paths = [out / "edited.ckpt", out / "edit_report.json", out / "edit_report.csv", out / "requests.jsonl"]
    save_checkpoint(edited, paths[0])
    paths[1].write_text(report.to_json() + "\n", encoding="utf-8")
    paths[2].write_text(report.to_csv(), encoding="utf-8")
    save_jsonl(requests, paths[3])
    inputs = {"model": Path(args.model), **files}
    write_manifest(out, "edit", args, inputs, paths, {"edit": cfg.seed, "requests": args.request_seed},
                   config_echo(cfg))
    print(f"edited {len(requests)} requests; total |delta| = {report.total_delta_norm:.4f}")
    return 0


def _metrics_rows(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + CSV_HEADER)
    for label, n, res in results:
        w.writerow([label] + ["" if x is None else repr(float(x)) if isinstance(x, float) else x
                              for x in res.csv_row(n)])
    return buf.getvalue()


def cmd_eval(args) -> int:
    if args.n_new < 3:
        raise UsageError("--n-new must be >= 3")
    requests = load_jsonl(args.requests)
    ecfg = EvalConfig(n_new=args.n_new, generation=not args.no_generation)
    results = []
    inputs = {"model": Path(args.model), "requests": Path(args.requests)}
    if args.baseline:
        inputs["baseline"] = Path(args.baseline)
        results.append(("pre", len(requests), evaluate_all(load_checkpoint(args.baseline), requests, ecfg)))
    results.append(("post", len(requests), evaluate_all(load_checkpoint(args.model), requests, ecfg)))
    out = _out_dir(args.out)
    report = {label: json.loads(res.to_json()) for label, _, res in results}
    paths = [out / "metrics.json", out / "metrics.csv"]
    paths[0].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths[1].write_text(_metrics_rows(results), encoding="utf-8")
    write_manifest(out, "eval", args, inputs, paths, {}, asdict(ecfg))
    for label, _, res in results:
        print(f"{label}: efficacy {res.efficacy:.1f} generalization {res.generalization:.1f} "
              f"specificity {res.specificity:.1f} score {res.score:.1f}")
    return 0


def cmd_analyze(args) -> int:
    if not args.prompts and not args.reports:
        raise UsageError("analyze needs --prompts and/or --reports")
    out = _out_dir(args.out)
    paths, inputs = [], {}
    if args.prompts:
        if not args.model:
            raise UsageError("--prompts requires --model")
        model = load_checkpoint(args.model)
        inputs["model"] = Path(args.model)
        src = _prompt_file(Path(args.prompts))
        inputs["prompts"] = src
        prompts = _prompt_list(src)
        prof = similarity_profile(model, prompts, args.k)
        p = out / "similarity.csv"
        p.write_text(prof.to_csv(), encoding="utf-8")
        paths.append(p)
    if args.reports:
        labels = args.labels.split(",") if args.labels else [Path(r).parent.name or r for r in args.reports]
        if len(labels) != len(args.reports):
            raise UsageError("--labels must match the number of --reports")
        reps = []
        for i, (lab, path) in enumerate(zip(labels, args.reports)):
            inputs[f"report{i}"] = Path(path)
            reps.append((lab, EditReport.from_json(Path(path).read_text(encoding="utf-8"))))
        try:
            table = delta_norm_comparison(reps)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        p = out / "delta_norms.csv"
        p.write_text(table.to_csv(), encoding="utf-8")
        paths.append(p)
    write_manifest(out, "analyze", args, inputs, paths, {}, {"k": args.k})
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def _prompt_file(path: Path) -> Path:
    return path / "records.jsonl" if path.is_dir() else path


def _prompt_list(path: Path):
    path = _prompt_file(path)
    if path.suffix == ".jsonl":
        return [r.src for r in load_jsonl(path)]
    return load_texts(path)


ABLATE_FIELDS = ["mode", "seed", "efficacy", "generalization", "specificity", "score", "total_delta_norm", "status"]


def run_ablation(model, records, texts, seeds, n_requests, base_cfg: EditConfig, modes=None, log_cell=None):
    """One metrics row per (mode, seed); failed cells are kept with status ``failed``."""
    modes = list(modes or ABLATION_MODES)
    rows = []
    for seed in seeds:
        reqs = edit_requests(records, n_requests, seed=seed)
        for mode in modes:
            cfg = EditConfig(**{**asdict(base_cfg), **ABLATION_MODES[mode], "seed": seed})
            try:
                edited, rep = apply_edits(model, reqs, cfg, sample_texts=texts)
                res = evaluate_all(edited, reqs, EvalConfig(generation=False))
                row = {"mode": mode, "seed": seed, "efficacy": res.efficacy,
                       "generalization": res.generalization, "specificity": res.specificity,
                       "score": res.score, "total_delta_norm": rep.total_delta_norm, "status": "ok"}
            except (EditError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.error("ablation cell %s/%s failed: %s", mode, seed, exc)
                row = {"mode": mode, "seed": seed, "status": "failed"}
            rows.append(row)
            if log_cell:
                log_cell(row)
    return rows


def aggregate_ablation(rows):
    """Mean of each metric per mode over successful cells."""
    out = []
    for mode in dict.fromkeys(r["mode"] for r in rows):
        ok = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
        agg = {"mode": mode, "seed": "mean", "status": f"{len(ok)} ok"}
        for k in ABLATE_FIELDS[2:-1]:
            agg[k] = float(np.mean([r[k] for r in ok])) if ok else None
        out.append(agg)
    return out


def reliability(row) -> float:
    return 0.5 * (row["efficacy"] + row["generalization"])


def cmd_ablate(args) -> int:
    mapping = _read_config(args.config)
    base = _edit_config(args, mapping)
    model = load_checkpoint(args.model)
    try:
        base.validate(model.config.n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    files = _data_files(Path(args.data))
    records = load_jsonl(files["records"])
    texts = load_texts(files["texts"])
    out = _out_dir(args.out)
    rows = run_ablation(model, records, texts, args.seeds, args.n_requests, base,
                        log_cell=lambda r: print(f"{r['mode']:>12} seed {r['seed']}: {r['status']}"))
    agg = aggregate_ablation(rows)
    by_mode = {a["mode"]: a for a in agg}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_FIELDS)
    for r in rows + agg:
        w.writerow(["" if r.get(k) is None else r.get(k) for k in ABLATE_FIELDS])
    pm, nd = by_mode.get("pmet"), by_mode.get("no_delta_a")
    if pm and nd and pm["efficacy"] is not None and nd["efficacy"] is not None:
        ok = reliability(pm) >= reliability(nd)
        w.writerow(["check:pmet_reliability>=no_delta_a", "", reliability(pm), reliability(nd), "", "", "",
                    "pass" if ok else "fail"])
    paths = [out / "ablation.csv"]
    paths[0].write_text(buf.getvalue(), encoding="utf-8")
    write_manifest(out, "ablate", args, {"model": Path(args.model), **files}, paths,
                   {"seeds": args.seeds}, config_echo(base))
    print(f"wrote {paths[0]}")
    failed = [r for r in rows if r["status"] != "ok"]
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _edit_flags(p):
    p.add_argument("--critical-layers", type=_layers, default=None, help="e.g. 2,3")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--spread", choices=["sqrt", "even"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--opt-lr", type=float, default=None)
    p.add_argument("--prefixes", type=int, default=None)
    p.add_argument("--no-delta-a", action="store_true", help="optimize only the FFN perturbation")
    p.add_argument("--edit-mhsa", action="store_true", help="also update the attention output projection")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pmetlab", description="Desk-scale key-value model editing lab.")
    ap.add_argument("--version", action="version", version=f"pmetlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic knowledge corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--paraphrases", type=int)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--objects", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the toy model on a corpus")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--target", type=float, help="memorization rate that ends training")
    p.add_argument("--freeze", type=_names, help="comma separated parameters to keep fixed; 'none' trains all")
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="apply a batch of edits")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus directory (covariance texts, default requests)")
    p.add_argument("--out", required=True)
    p.add_argument("--requests-file", help="edit requests as JSONL; default samples from the corpus")
    p.add_argument("--n-requests", type=int, default=20)
    p.add_argument("--request-seed", type=int, default=0)
    p.add_argument("--seed", type=int)
    _edit_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="compute editing metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--requests", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", help="pre-edit checkpoint; adds a 'pre' row")
    p.add_argument("--n-new", type=int, default=20)
    p.add_argument("--no-generation", action="store_true", help="skip fluency and consistency")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="similarity probes and update-norm tables")
    p.add_argument("--model")
    p.add_argument("--prompts", help="corpus dir, records JSONL or one prompt per line")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--reports", nargs="*", help="edit_report.json files to compare")
    p.add_argument("--labels", help="comma separated labels for --reports")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="run the four ablation modes over several seeds")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2, 3, 4])
    p.add_argument("--n-requests", type=int, default=20)
    p.add_argument("--seed", type=int)
    _edit_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("PMETLAB_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        print("pmetlab: PMETLAB_THREADS must be a positive integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pmetlab {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"pmetlab {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
