"""Command-line entry point: ``partmatch <subcommand> [flags]``.

Every subcommand reads an optional JSON config (sections ``synth``, ``train``,
``eval``, ``gradcheck``), lets flags override it, echoes the effective config
to ``<out>/config.json`` and writes its artifacts under ``--out``. Failures
exit nonzero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcheck, retrieval, synth
from .graph_match import build_affinity, regularizer, solve_iqp_exact, threshold_baseline
from .model import load_bank, load_images, load_model, save_bank, save_model
from .tensor_io import ManifestError, TensorFormatError, load_manifest
from .training import TrainConfig, build_model, load_train_split, pretrain_classifiers, train

log = logging.getLogger("partmatch")

SECTIONS = ("synth", "train", "eval", "gradcheck")
EVAL_DEFAULTS = {"mode": "pvpm", "max_rank": 20}
GRADCHECK_DEFAULTS = {"ops": "all", "trials": 20, "step": 1e-5, "tolerance": gradcheck.TOLERANCE}
TRAIN_MODES = {"pvpm": "iqp", "thre": "threshold"}

METRICS_CSV = "metrics.csv"
EVAL_JSON = "eval.json"
SWEEP_CSV = "sweep.csv"
GRADCHECK_JSON = "gradcheck.json"
CHECKPOINT = "checkpoint.pvtc"
BANK = "bank.pvtc"
CONFIG_ECHO = "config.json"
MANIFEST = "manifest.jsonl"
SYNTH_JSON = "synth.json"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


# -- config ------------------------------------------------------------------

def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise CliError("config", f"unknown key(s) in [{section}]: {sorted(unknown)}")


def load_config(path) -> dict:
    """Read a JSON config and reject unknown sections or keys."""
    if path is None:
        return {s: {} for s in SECTIONS}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("config", f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("config", "config must be a JSON object")
    _check_keys("top level", raw, SECTIONS)
    out = {s: dict(raw.get(s) or {}) for s in SECTIONS}
    _check_keys("synth", out["synth"], [f.name for f in fields(synth.SynthConfig)])
    _check_keys("train", out["train"], [f.name for f in fields(TrainConfig)])
    _check_keys("eval", out["eval"], EVAL_DEFAULTS)
    _check_keys("gradcheck", out["gradcheck"], GRADCHECK_DEFAULTS)
    return out


def _build(kind, factory, values):
    try:
        return factory(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"invalid {kind} config: {exc}") from exc


def synth_config(args, cfg) -> synth.SynthConfig:
    values = dict(cfg["synth"])
    if args.seed is not None:
        values["seed"] = args.seed
    return _build("synth", synth.SynthConfig, values)


def train_config(args, cfg, allow_mode=True) -> TrainConfig:
    values = dict(cfg["train"])
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        values["lam"] = args.lam
    if getattr(args, "tau", None) is not None:
        values["tau"] = args.tau
    mode = getattr(args, "mode", None)
    if allow_mode and mode is not None:
        if mode not in TRAIN_MODES:
            raise CliError("usage", f"--mode {mode} is an evaluation mode; training takes {sorted(TRAIN_MODES)}", 2)
        values["pseudo_label"] = TRAIN_MODES[mode]
    if values.get("pseudo_label", "iqp") == "iqp" and getattr(args, "tau", None) is not None:
        raise CliError("usage", "--tau only applies to threshold pseudo-labels (--mode thre)", 2)
    return _build("train", TrainConfig, values)


def eval_settings(args, cfg) -> dict:
    out = {**EVAL_DEFAULTS, **cfg["eval"]}
    if args.mode is not None:
        out["mode"] = args.mode
    if out["mode"] not in retrieval.MODES:
        raise CliError("usage", f"unknown mode {out['mode']!r}; choose from {list(retrieval.MODES)}", 2)
    return out


def echo_config(out: Path, command: str, **sections) -> None:
    payload = {"command": command}
    for name, value in sections.items():
        payload[name] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
    (out / CONFIG_ECHO).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- path resolution ---------------------------------------------------------

def _data_dir(args) -> Path:
    return Path(args.data) if args.data else Path(args.out)


def _find(explicit, name, *dirs) -> Path:
    if explicit:
        path = Path(explicit)
        if not path.is_file():
            raise CliError("data", f"{path} does not exist")
        return path
    for d in dirs:
        if (Path(d) / name).is_file():
            return Path(d) / name
    raise CliError("data", f"no {name} found in {', '.join(str(d) for d in dirs)}")


def _manifest(args):
    path = _data_dir(args) / MANIFEST
    if not path.is_file():
        raise CliError("data", f"no manifest at {path}; run `partmatch synth` first")
    return load_manifest(path)


def _model(args):
    return load_model(_find(args.checkpoint, CHECKPOINT, args.out, _data_dir(args)))


def _bank(args):
    return load_bank(_find(args.bank, BANK, args.out, _data_dir(args)))


def _check_mode_vs_model(mode: str, model) -> None:
    trained = model.meta.get("pseudo_label", "iqp")
    if mode == "thre" and trained != "threshold":
        raise CliError("usage", "--mode thre needs a checkpoint trained with threshold pseudo-labels", 2)
    if mode in ("pvpm", "pga-only", "pvp-only") and trained != "iqp":
        raise CliError("usage", f"--mode {mode} needs an IQP-trained checkpoint (this one used {trained})", 2)


def _reject(args, *names):
    for name in names:
        if getattr(args, name, None) is not None:
            flag = "--lambda" if name == "lam" else f"--{name}"
            raise CliError("usage", f"{flag} does not apply to `{args.command}`", 2)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args, cfg, out):
    _reject(args, "lam", "tau", "mode")
    scfg = synth_config(args, cfg)
    synth.generate(scfg, out)
    (out / SYNTH_JSON).write_text(json.dumps(synth.config_dict(scfg), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    echo_config(out, "synth", synth=scfg)
    return {"manifest": MANIFEST}


def cmd_pretrain(args, cfg, out):
    _reject(args, "lam", "tau", "mode")
    tcfg = train_config(args, cfg, allow_mode=False)
    manifest = _manifest(args)
    _, feats, _, labels = load_train_split(manifest)
    bank = pretrain_classifiers(feats, labels, tcfg.n_parts, tcfg.pretrain_epochs)
    save_bank(bank, out / BANK, {"n_parts": tcfg.n_parts, "pretrain_epochs": tcfg.pretrain_epochs})
    echo_config(out, "pretrain", train=tcfg)
    return {"bank": BANK, "checksum": bank.checksum()}


def _augmenter(args, tcfg):
    if tcfg.augment_prob == 0:
        return None
    path = _data_dir(args) / SYNTH_JSON
    if not path.is_file():
        raise CliError("data", f"augment_prob > 0 needs the generator settings in {path}")
    return synth.batch_augmenter(synth.SynthConfig(**json.loads(path.read_text(encoding="utf-8"))))


def fit(manifest, bank, tcfg: TrainConfig, augment=None):
    records, feats, poses, labels = load_train_split(manifest)
    if bank.n_parts != tcfg.n_parts:
        raise CliError("config", f"classifier bank has N_p={bank.n_parts}, train config says {tcfg.n_parts}")
    model = build_model(tcfg, poses.shape[-2:], feats.shape[-2:])
    model.meta.update({"pseudo_label": tcfg.pseudo_label, "lam": tcfg.lam, "tau": tcfg.tau, "seed": tcfg.seed})
    rows = train(model, bank, feats, poses, labels, tcfg, augment=augment)
    return model, rows


def write_metrics(path: Path, rows) -> None:
    cols = ["step", "epoch", "L_v", "L_m", "L_c", "L_total", "mean_selected", "lr"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            r = {**r, "L_total": r["L_v"] + r["L_m"] + r["L_c"]}
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def cmd_train(args, cfg, out):
    tcfg = train_config(args, cfg)
    manifest = _manifest(args)
    model, rows = fit(manifest, _bank(args), tcfg, _augmenter(args, tcfg))
    save_model(model, out / CHECKPOINT)
    write_metrics(out / METRICS_CSV, rows)
    echo_config(out, "train", train=tcfg)
    return {"checkpoint": CHECKPOINT, "steps": len(rows)}


def _pair_parts(args, mode, model, n_parts):
    manifest = _manifest(args)
    try:
        recs = [manifest.get(i) for i in args.pair]
    except KeyError as exc:
        raise CliError("data", f"image id {exc.args[0]!r} not in manifest") from exc
    feats, poses = load_images(recs)
    return recs, retrieval.image_parts(model, feats, poses, mode, n_parts)


def cmd_pseudo_label(args, cfg, out):
    model = _model(args)
    tcfg = train_config(args, cfg)
    if not model.state.initialized:
        raise CliError("data", "checkpoint has no moving-average state; train it first")
    mode = args.mode or ("thre" if tcfg.pseudo_label == "threshold" else "pvpm")
    recs, (parts, _) = _pair_parts(args, "pga-only", model, None)
    if recs[0].label != recs[1].label:
        log.warning("%s and %s have different identities", *args.pair)
    aff = build_affinity(parts[0], parts[1], model.state)
    lam_bar = regularizer(model.state, tcfg.lam)
    if mode == "thre":
        v = threshold_baseline(aff.matrix, tcfg.tau)
    else:
        v = solve_iqp_exact(aff.matrix, lam_bar)
    report = {"pair": list(args.pair), "mode": mode, "lambda": tcfg.lam, "tau": tcfg.tau,
              "M": aff.matrix.tolist(), "lambda_bar": lam_bar.tolist(),
              "v_star": [int(x) for x in v.v], "objective": v.objective}
    print(json.dumps(report))
    echo_config(out, "pseudo-label", train=tcfg)
    return None


def cmd_match(args, cfg, out):
    _reject(args, "lam", "tau")
    settings = eval_settings(args, cfg)
    mode = settings["mode"]
    model = None if mode == "baseline" else _model(args)
    if model is not None:
        _check_mode_vs_model(mode, model)
    n_parts = model.n_parts if model is not None else train_config(args, cfg, allow_mode=False).n_parts
    _, (parts, vis) = _pair_parts(args, mode, model, n_parts)
    d = retrieval.part_distances(parts[0], parts[1])
    dist = retrieval.weighted_distance(d, vis[0], vis[1])
    print(json.dumps({"pair": list(args.pair), "mode": mode, "part_distances": d.tolist(),
                      "v_p": vis[0].tolist(), "v_g": vis[1].tolist(), "distance": dist}))
    echo_config(out, "match", eval=settings)
    return None


def cmd_eval(args, cfg, out):
    _reject(args, "lam", "tau")
    settings = eval_settings(args, cfg)
    mode = settings["mode"]
    manifest = _manifest(args)
    model = None
    if mode == "baseline":
        n_parts = train_config(args, cfg, allow_mode=False).n_parts
    else:
        model = _model(args)
        _check_mode_vs_model(mode, model)
        n_parts = model.n_parts
    res = retrieval.evaluate(manifest, model, mode, n_parts, settings["max_rank"])
    probes = [r.id for r in manifest.by_role("probe")]
    gallery = [r.id for r in manifest.by_role("gallery")]
    report = {"mode": mode, "n_parts": n_parts, "n_gallery": len(gallery),
              "same_camera_exclusion": False, **res.to_json(probes)}
    (out / EVAL_JSON).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.per_query:
        write_per_query(out / "eval_queries.csv", res, probes, gallery, manifest)
    echo_config(out, "eval", eval=settings)
    return {"rank1": res.rank1, "mAP": res.mAP}


def write_per_query(path, res, probes, gallery, manifest):
    labels = {r.id: r.label for r in manifest.records}
    kept = [q for i, q in enumerate(probes) if i not in set(res.excluded)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query", "first_match_rank", "ap", "top1"])
        for q, ap in zip(kept, res.ap):
            order = res.rankings[probes.index(q)]
            ranked = [gallery[j] for j in order]
            first = next(k for k, g in enumerate(ranked, 1) if labels[g] == labels[q])
            writer.writerow([q, first, repr(float(ap)), ranked[0]])


def _sweep_point(job):
    data, bank_path, param, value, tcfg_dict, mode, max_rank = job
    manifest = load_manifest(Path(data) / MANIFEST)
    tcfg = TrainConfig(**tcfg_dict)
    if param == "n_parts":
        _, feats, _, labels = load_train_split(manifest)
        bank = pretrain_classifiers(feats, labels, tcfg.n_parts, tcfg.pretrain_epochs)
    else:
        bank = load_bank(bank_path)
    model, _ = fit(manifest, bank, tcfg)
    res = retrieval.evaluate(manifest, model, mode, tcfg.n_parts, max_rank)
    return value, res


def cmd_sweep(args, cfg, out):
    _reject(args, "lam")
    if args.param is None or args.grid is None:
        raise CliError("usage", "sweep needs --param and --grid", 2)
    param = {"lambda": "lambda", "lam": "lambda", "n_parts": "n_parts", "N_p": "n_parts"}.get(args.param)
    if param is None:
        raise CliError("usage", f"unknown sweep parameter {args.param!r}; choose lambda or n_parts", 2)
    try:
        grid = retrieval.parse_grid(args.grid)
        retrieval.validate_grid(param, grid)
    except ValueError as exc:
        raise CliError("usage", str(exc), 2) from exc
    settings = eval_settings(args, cfg)
    mode = settings["mode"]
    if mode == "baseline":
        raise CliError("usage", "a sweep retrains the model; --mode baseline has nothing to sweep", 2)
    # pga-only / pvp-only evaluate an IQP-trained model
    base = train_config(args, cfg, allow_mode=mode in TRAIN_MODES)
    bank_path = None
    if param == "lambda":
        bank_path = str(_find(args.bank, BANK, args.out, _data_dir(args)))
    jobs = []
    for value in grid:
        key = "lam" if param == "lambda" else "n_parts"
        tcfg = {**base.to_dict(), key: float(value) if param == "lambda" else int(value)}
        jobs.append((str(_data_dir(args)), bank_path, param, value, tcfg, mode, settings["max_rank"]))
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    (out / SWEEP_CSV).write_text(retrieval.sweep_table(rows), encoding="utf-8")
    echo_config(out, "sweep", train=base, eval=settings, sweep={"param": param, "grid": grid})
    return {"rows": len(rows)}


def cmd_gradcheck(args, cfg, out):
    _reject(args, "lam", "tau", "mode")
    settings = {**GRADCHECK_DEFAULTS, **cfg["gradcheck"]}
    seed = args.seed if args.seed is not None else 0
    report = gradcheck.check_gradients(settings["ops"], trials=settings["trials"], seed=seed,
                                       step=settings["step"], tolerance=settings["tolerance"])
    (out / GRADCHECK_JSON).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    echo_config(out, "gradcheck", gradcheck={**settings, "seed": seed})
    if not report["passed"]:
        bad = sorted(k for k, r in report["ops"].items() if not r["passed"])
        raise CliError("gradcheck", f"relative error above tolerance for {bad}")
    return {"passed": True}


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "pseudo-label": cmd_pseudo_label,
    "match": cmd_match, "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with synth/train/eval/gradcheck sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("--data", help="dataset directory holding manifest.jsonl (default: --out)")
    common.add_argument("--checkpoint", help=f"model checkpoint (default: {CHECKPOINT} in --out or --data)")
    common.add_argument("--bank", help=f"classifier bank (default: {BANK} in --out or --data)")
    common.add_argument("--mode", choices=retrieval.MODES)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="partmatch", description="Occlusion-aware part matching on PVT tensors.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("synth", "pretrain", "train", "gradcheck"):
        sub.add_parser(name, parents=[common])
    for name in ("pseudo-label", "match"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--pair", nargs=2, required=True, metavar=("PROBE_ID", "GALLERY_ID"))
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--per-query", action="store_true", help="also write eval_queries.csv")
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--param", help="lambda or n_parts")
    p.add_argument("--grid", help="start:stop:step (inclusive) or a comma list")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.workers < 1:
            raise CliError("usage", "--workers must be >= 1", 2)
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, cfg, out)
        if summary is not None:
            log.info("%s done: %s", args.command, summary)
        return 0
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (ManifestError, TensorFormatError) as exc:
        return _fail("data", str(exc), 1)
    except (ValueError, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


def _fail(kind, message, code) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
