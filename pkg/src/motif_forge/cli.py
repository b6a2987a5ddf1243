"""Command-line driver: preprocess, discover, simulate, evaluate, report.

Every output directory carries ``manifest.json`` with the normalized
configuration and its hash; writing a different configuration into an
existing output directory is refused.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import __version__

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("motif_forge")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
DISCOVER_METHODS = ("derived", "mmm", "cmmm", "two-stage-expert", "two-stage-hmm",
                    "two-stage-topic")
TASKS = ("hypo_long", "hyper_long", "hypo_short", "hyper_short")


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# config, manifests, artifacts


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"config file not found: {path}")
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"cannot parse config {path}: {e}") from e


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def prepare_out(out, command: str, config: dict) -> Path:
    """Create ``out`` (or a cache directory) and claim it with a manifest."""
    h = config_hash(config)
    if out is None:
        root = Path(os.environ.get("MOTIF_FORGE_CACHE", "motif-forge-out"))
        out = root / f"{command.replace(' ', '-')}-{h[:12]}"
    out = Path(out)
    manifest = {"tool": "motif-forge", "version": __version__, "command": command,
                "config": config, "config_hash": h}
    mpath = out / "manifest.json"
    if mpath.exists():
        old = json.loads(mpath.read_text())
        if old.get("config_hash") != h:
            raise UsageError(f"{out} holds output of a different configuration; "
                             "choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def require(path, what) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "log_prob"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def save_labelings(directory, segments, tokens, info):
    """Per-segment labelled windows plus a small description of the ids."""
    with open(Path(directory) / "labelings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "start", "length", "motif", "context", "background"])
        for seg, tok in zip(segments, tokens):
            for a, l, z, c, b in zip(tok.starts, tok.lengths, tok.motifs, tok.contexts,
                                     tok.background):
                w.writerow([seg.key, int(a), int(l), int(z), int(c), int(bool(b))])
    write_json(Path(directory) / "labeling_info.json", info)


def load_labelings(directory, segments):
    from .evaluation import Tokens

    directory = require(directory, "labelings directory")
    csv_path = require(directory / "labelings.csv", "labelings")
    info = json.loads(require(directory / "labeling_info.json", "labeling info").read_text())
    rows: dict = {}
    with open(csv_path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["segment"], []).append(r)
    out = []
    for seg in segments:
        rs = rows.get(seg.key, [])
        col = lambda k: np.array([int(r[k]) for r in rs], dtype=np.int64)
        out.append(Tokens(col("start"), col("length"), col("motif"), col("context"),
                          col("background").astype(bool)))
    return out, info


def load_segments_dir(directory):
    from .signal import load_segments

    path = require(Path(directory) / "segments.csv", "preprocessed segments")
    segments = load_segments(path)
    if not segments:
        raise UsageError(f"{path} contains no day segments")
    return segments


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    from .signal import load_signals, save_segments, segment_days, write_exclusion_report

    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    config = {"input": str(src), "input_sha256": hashlib.sha256(src.read_bytes()).hexdigest(),
              "max_gap_minutes": args.max_gap_minutes}
    signals = load_signals(src)
    out = prepare_out(args.out, "preprocess", config)
    segments, reports = [], []
    for sig in signals:
        seg, rep = segment_days(sig, timedelta(minutes=args.max_gap_minutes))
        segments.extend(seg)
        reports.extend(rep)
    save_segments(segments, out / "segments.csv")
    write_exclusion_report(reports, out / "exclusions.csv")
    print(f"{len(segments)} day segments kept, {sum(not r.kept for r in reports)} excluded -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# discover


def _fit_subset(segments, n_days, seed):
    if not n_days or n_days >= len(segments):
        return list(segments)
    idx = np.sort(np.random.default_rng([seed, 11]).choice(len(segments), n_days, replace=False))
    return [segments[i] for i in idx]


def _mmm_labels(args, std_segments):
    from .mmm import EMConfig, assign_motifs, fit_mmm

    model = fit_mmm(_fit_subset(std_segments, args.fit_days, args.seed), args.motifs, args.lm,
                    EMConfig(n_init=args.em_restarts, split_merge=args.split_merge),
                    seed=args.seed)
    return model, [assign_motifs(model, s).labels for s in std_segments]


def _window_contexts(per_sample, l_c):
    from .context import ContextSequence, to_window_resolution

    return to_window_resolution(ContextSequence(per_sample), l_c).labels


def cmd_discover(args) -> int:
    from .cmmm import ContextualLabeling, assign_contextual, fit_cmmm
    from .evaluation import tokens_of
    from .mmm import EMConfig
    from .signal import standardize

    method = args.method
    config = {k: v for k, v in vars(args).items()
              if k not in ("out", "threads", "func", "config", "command", "verbose")}
    segments = load_segments_dir(args.segments)
    if method != "derived":
        if args.lc % args.lm:
            raise UsageError("--lc must be a multiple of --lm")
        if args.motifs < 1 or args.contexts < 1:
            raise UsageError("--motifs and --contexts must be >= 1")
    if method == "cmmm" and args.burn_in >= args.samples:
        raise UsageError("--burn-in must be smaller than --samples")
    out = prepare_out(args.out, f"discover {method}", config)
    std, stats_ = standardize(segments)
    info = {"method": method, "standardization": list(stats_)}

    if method == "derived":
        from .derived import (discover_derived, discover_in_context, match_in_context,
                              match_motif, save_motifs)
        from .signal import SaxConfig

        sax = SaxConfig(args.alphabet, args.paa)
        lengths = [int(x) for x in args.lengths.split(",")]
        fit = _fit_subset(segments, args.fit_days, args.seed)
        if args.context_rule == "none":
            motifs = discover_derived(fit, lengths, args.min_support, args.radius, sax,
                                      args.hamming)
            per_seg = [[o for m in motifs for o in match_motif(m, s, args.radius)]
                       for s in segments]
            n_c = 1
        else:
            from .context import expert_context

            labels = {s.key: expert_context(s, args.k, args.tau, args.dilation).labels
                      for s in segments}
            motifs = discover_in_context(fit, [labels[s.key] for s in fit], lengths,
                                         args.min_support, args.radius, sax, args.hamming,
                                         n_contexts=2)
            per_seg = [[o for m in motifs for o in match_in_context(m, s, labels[s.key],
                                                                     args.radius)]
                       for s in segments]
            n_c = 2
        save_motifs(motifs, out / "motifs.json")
        table = {m.id: m for m in motifs}
        tokens = [tokens_of(sorted(o, key=lambda x: (x.offset, x.motif_id)), motifs=table)
                  for o in per_seg]
        info.update(n_motifs=len(motifs), n_c=n_c, l_c=None)
    elif method == "mmm":
        model, labels = _mmm_labels(args, std)
        model.save(out / "model.json")
        write_trace(out / "trace.csv", model.meta["trace"])
        tokens = [tokens_of(l, args.lm) for l in labels]
        info.update(n_motifs=args.motifs + 1, n_c=1, l_c=None)
    elif method == "cmmm":
        fit = fit_cmmm(_fit_subset(std, args.fit_days, args.seed), args.motifs, args.lm, args.lc,
                       args.contexts, args.samples, args.burn_in, args.seed,
                       theta_kernel=args.theta_kernel,
                       em_cfg=EMConfig(n_init=args.em_restarts, split_merge=args.split_merge))
        fit.model.save(out / "model.json")
        write_trace(out / "trace.csv", fit.trace)
        labs = [assign_contextual(fit.model, s) for s in std]
        tokens = [tokens_of(l) for l in labs]
        info.update(n_motifs=args.motifs + 1, n_c=args.contexts, l_c=args.lc)
    else:
        model, labels = _mmm_labels(args, std)
        model.save(out / "mmm_model.json")
        ratio = args.lc // args.lm
        if method == "two-stage-expert":
            from .context import expert_context

            ctx = [_window_contexts(expert_context(s, args.k, args.tau, args.dilation).labels,
                                    args.lc) for s in segments]
            n_c = 2
        elif method == "two-stage-hmm":
            from .context import hmm_decode, hmm_fit

            hmm = hmm_fit(_fit_subset(segments, args.fit_days, args.seed), args.contexts,
                          args.seed)
            hmm.save(out / "hmm_model.json")
            ctx = [_window_contexts(hmm_decode(hmm, s).labels, args.lc) for s in segments]
            n_c = args.contexts
        else:
            from .context import motif_topic_context

            gamma, seqs = motif_topic_context(labels, args.lc, args.lm, args.contexts,
                                              seed=args.seed, n_motifs=args.motifs)
            write_json(out / "topic_gamma.json", gamma.tolist())
            ctx = [s.labels for s in seqs]
            n_c = args.contexts
        tokens = []
        for c, z in zip(ctx, labels):
            n = min(len(c), len(z) // ratio)
            tokens.append(tokens_of(ContextualLabeling(c[:n], z[:n * ratio], args.lm, args.lc)))
        info.update(n_motifs=args.motifs + 1, n_c=n_c, l_c=args.lc)
    save_labelings(out, segments, tokens, info)
    print(f"discover {method}: labelled {len(segments)} segments -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from .simgen import gen_sim_dataset, random_cmmm

    if args.signals < 1 or args.beta < 0:
        raise UsageError("--signals must be >= 1 and --beta >= 0")
    if args.lc % args.lm:
        raise UsageError("--lc must be a multiple of --lm")
    config = {k: v for k, v in vars(args).items()
              if k not in ("out", "threads", "func", "config", "command", "verbose")}
    out = prepare_out(args.out, "simulate", config)
    model = random_cmmm(args.motifs, args.lm, args.lc, args.contexts,
                        seed=args.seed if args.model_seed is None else args.model_seed)
    sim = gen_sim_dataset(model, args.signals, args.windows_per_signal, args.beta, args.seed)
    sim.save(out)
    print(f"simulated {args.signals} signals (beta={args.beta}) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _sim_dataset_from_config(cfg, seed):
    from .simgen import gen_sim_dataset, load_sim_dataset, random_cmmm

    if "dataset" in cfg:
        path = require(cfg["dataset"], "simulation dataset")
        require(Path(path) / "simulation.json", "simulation metadata")
        return load_sim_dataset(path)
    p = dict(cfg.get("simulation", {}))
    model = random_cmmm(p.get("motifs", 20), p.get("lm", 8), p.get("lc", 72),
                        p.get("contexts", 2), seed=p.get("model_seed", seed))
    return gen_sim_dataset(model, p.get("signals", 2000), p.get("windows_per_signal", 4),
                           float(p.get("beta", 1.0)), p.get("seed", seed))


def _evaluate_simulation(cfg, out, seed, threads):
    from .cmmm import CmmmModel
    from .experiments import SIM_METHODS, beta_sweep, fit_sim_model, simulation_features

    sim = _sim_dataset_from_config(cfg, seed)
    methods = cfg.get("methods", list(SIM_METHODS))
    sampler = cfg.get("sampler", {})
    if "model" in cfg:
        model = CmmmModel.load(require(cfg["model"], "model artifact"))
    else:
        fit = fit_sim_model(sim, sampler.get("motifs", sim.true_model.n_motifs),
                            sampler.get("contexts", sim.true_model.n_c),
                            sampler.get("n_samples", 2000), sampler.get("burn_in", 1000),
                            sampler.get("seed", seed))
        model = fit.model
        write_trace(out / "trace.csv", fit.trace)
    model.save(out / "model.json")
    feats = simulation_features(sim, model, seed, methods)
    results = beta_sweep(sim, feats, cfg.get("betas", [0.0, 0.4, 1.0]), cfg.get("n_splits", 25),
                         cfg.get("test_fraction", 0.25), seed, n_jobs=threads)
    results.meta.update(seed=seed, kind="simulation", n_signals=sim.n_signals)
    with open(out / "beta_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "beta", "mean_auc", "std_auc"])
        for r in results.rows:
            w.writerow([r["method"], repr(r["beta"]), repr(r["mean_auc"]), repr(r["std_auc"])])
    return results


def _parse_task(name, cfg):
    from .evaluation import TaskSpec

    if name not in TASKS:
        raise UsageError(f"unknown task {name!r}; choose from {', '.join(TASKS)}")
    event, horizon = name.split("_")
    opts = {k: cfg[k] for k in ("hypo_level", "hyper_level", "event_min_duration",
                                "long_hyper_min_events", "short_horizon", "short_grid")
            if k in cfg}
    return TaskSpec(event, horizon, **opts)


def _evaluate_real(cfg, out, seed, threads):
    from .evaluation import (REPRESENTATIONS, ResultsTable, feature_columns, make_task_rows,
                             n_columns, noise_draws, run_experiment)

    segments = load_segments_dir(require(cfg.get("segments", ""), "segments directory"))
    reps = cfg.get("representations", [])
    if not reps:
        raise UsageError("config lists no representations")
    tasks = [_parse_task(t, cfg) for t in cfg.get("tasks", list(TASKS))]
    results = ResultsTable(meta={"seed": seed, "kind": "real"})
    coverage = []
    for rep in reps:
        kind = rep.get("representation", "motifs")
        if kind not in REPRESENTATIONS:
            raise UsageError(f"unknown representation {kind!r}")
        tokens, info = load_labelings(rep["labelings"], segments)
        n_c = info.get("n_c", 1)
        card = rep.get("noise_cardinality", n_c)
        width_c = card if kind == "motifs_noise" else n_c
        rng = np.random.default_rng([seed, 3])
        cols = []
        for tok in tokens:
            noise = noise_draws(tok, card, rng, info.get("l_c")) if kind == "motifs_noise" else None
            cols.append(feature_columns(tok, kind, info["n_motifs"], width_c, noise))
        width = n_columns(kind, info["n_motifs"], width_c)
        for task in tasks:
            fm = make_task_rows(segments, tokens, task, cols, width)
            if cfg.get("recent_only"):
                fm = fm.subset(np.flatnonzero(fm.meta["recent"]))
            coverage.append((rep["name"], task.name, len(fm),
                             float(fm.meta["recent"].mean()) if len(fm) else 0.0))
            if len(np.unique(fm.groups)) < 2 or fm.y.all() or not fm.y.any():
                log.warning("%s/%s: not enough patients or classes; skipped", rep["name"],
                            task.name)
                continue
            run_experiment({rep["name"]: fm.X}, fm.y, fm.groups, task.name,
                           cfg.get("n_splits", 100), cfg.get("test_fraction", 0.25), seed,
                           n_jobs=threads, results=results)
    with open(out / "coverage.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "task", "rows", "recent_motif_fraction"])
        for row in coverage:
            w.writerow([row[0], row[1], row[2], repr(row[3])])
    return results


def cmd_evaluate(args) -> int:
    if args.config is None:
        raise UsageError("evaluate needs --config")
    cfg = load_config(args.config)
    seed = cfg.get("seed", args.seed)
    out = prepare_out(args.out, "evaluate", {"experiment": cfg, "seed": seed})
    kind = cfg.get("kind", "simulation")
    if kind == "simulation":
        results = _evaluate_simulation(cfg, out, seed, args.threads)
    elif kind == "real":
        results = _evaluate_real(cfg, out, seed, args.threads)
    else:
        raise UsageError(f"unknown experiment kind {kind!r}")
    results.to_csv(out / "results.csv")
    results.to_json(out / "results.json")
    results.to_split_csv(out / "splits.csv")
    print(f"evaluated {len(results.rows)} (method, task) cells -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    d = require(args.directory, "output directory")
    manifest = json.loads(require(d / "manifest.json", "manifest").read_text())
    print(f"command: {manifest['command']}  version: {manifest['version']}  "
          f"config: {manifest['config_hash'][:12]}")
    if (d / "results.json").exists():
        data = json.loads((d / "results.json").read_text())
        for r in data["rows"]:
            beta = f" beta={r['beta']:g}" if "beta" in r else ""
            print(f"{r['method']:<24} {r['task']:<12}{beta}  AUC {r['mean_auc']:.3f} "
                  f"+/- {r['std_auc']:.3f}  ({r['n_splits']} splits)")
    if (d / "coverage.csv").exists():
        with open(d / "coverage.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                print(f"{r['method']:<24} {r['task']:<12} rows={r['rows']} "
                      f"recent-motif coverage={float(r['recent_motif_fraction']):.3f}")
    if (d / "exclusions.csv").exists():
        with open(d / "exclusions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        kept = sum(r["kept"] == "true" for r in rows)
        print(f"days kept: {kept} of {len(rows)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--out", help="output directory (default: under $MOTIF_FORGE_CACHE)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    p.add_argument("--config", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motif-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", help="TOML/JSON: experiment spec for evaluate, option "
                                         "defaults ([preprocess], [discover], [simulate]) otherwise")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="load signals, interpolate, split into days")
    p.add_argument("input")
    p.add_argument("--max-gap-minutes", type=float, default=30.0)
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("discover", help="find motifs and contexts")
    p.add_argument("method", choices=DISCOVER_METHODS)
    p.add_argument("--segments", required=True, help="preprocess output directory")
    p.add_argument("--motifs", type=int, default=20)
    p.add_argument("--lm", type=int, default=8)
    p.add_argument("--lc", type=int, default=72)
    p.add_argument("--contexts", type=int, default=2)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--theta-kernel", choices=("mala", "gibbs"), default="mala")
    p.add_argument("--fit-days", type=int, default=0, help="fit on a random subset of days")
    p.add_argument("--em-restarts", type=int, default=3)
    p.add_argument("--split-merge", type=int, default=10,
                   help="split-and-merge rounds after EM (mixture fits and CMMM start)")
    p.add_argument("--lengths", default="8,12,16")
    p.add_argument("--min-support", type=int, default=10)
    p.add_argument("--radius", type=float, default=0.75)
    p.add_argument("--alphabet", type=int, default=5)
    p.add_argument("--paa", type=int, default=2)
    p.add_argument("--hamming", type=int, default=1)
    p.add_argument("--context-rule", choices=("none", "expert"), default="none",
                   help="derived only: discover within expert-rule contexts")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--tau", type=float, default=10.0)
    p.add_argument("--dilation", type=int, default=6)
    _common(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("simulate", help="draw a labelled dataset from a random CMMM")
    p.add_argument("--signals", type=int, default=2000)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--motifs", type=int, default=20)
    p.add_argument("--lm", type=int, default=8)
    p.add_argument("--lc", type=int, default=72)
    p.add_argument("--contexts", type=int, default=2)
    p.add_argument("--windows-per-signal", type=int, default=4)
    p.add_argument("--model-seed", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score representations by classification AUC")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize an output directory")
    p.add_argument("directory", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config_defaults(parser, argv, args):
    """Re-parse with ``[command]`` table values from --config as defaults."""
    if args.command == "evaluate" or not args.config:
        return args
    cfg = load_config(args.config).get(args.command, {})
    if not cfg:
        return args
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    known = {a.dest for a in sp._actions}
    unknown = set(k.replace("-", "_") for k in cfg) - known
    if unknown:
        raise UsageError(f"unknown [{args.command}] options in config: {sorted(unknown)}")
    sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args = _apply_config_defaults(parser, argv, args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as e:
        print(f"motif-forge: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as e:
        print(f"motif-forge: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, OSError) as e:
        from .signal import LoadError

        if isinstance(e, LoadError):
            print(f"motif-forge: error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"motif-forge: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - report any failure with an exit code
        print(f"motif-forge: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
