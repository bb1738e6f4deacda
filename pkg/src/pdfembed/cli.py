"""``pdfembed`` command line.

Every command writes its main output to ``--out`` and a run manifest to
``<out>.manifest.json`` recording flags, seed, versions, input/output SHA-256
digests and wall-clock time. Exit codes: 0 success, 2 input or validation
error, 3 numerical failure. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .encoder import ModelConfig, encode, level_from_h, normalize_h, predict_raw
from .errors import InputError, NumericalError, PdfEmbedError
from .gallery import build_store, read_store, scan
from .levelpdf import LevelGrid, PdfFamily, solve
from .objectives import NAMES, ObjectiveSpec, targets_for
from .protocols import eval_report
from .synthgen import SynthConfig, load_pairs, read_annotations, read_image, split, write_annotations, write_dataset
from .training import Schedule, predict_pairs, train

log = logging.getLogger("pdfembed")


# ----------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = _sha256(p)
        elif p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[str(f)] = _sha256(f)
    return out


def _fmt17(obj):
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, float):
        return format(obj, ".17g")
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt17(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt17(v) for v in obj) + "]"
    return json.dumps(obj)


def _write_json(path, obj, exact=False) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    text = _fmt17(obj) if exact else json.dumps(obj, indent=2)
    Path(path).write_text(text + "\n")


def _load_images(directory):
    files = sorted(Path(directory).glob("*.imgf"))
    if not files:
        raise InputError(f"no .imgf images in {directory}")
    return files, np.stack([read_image(f) for f in files])


def _load_annotated(path, N):
    path = Path(path)
    records = read_annotations(path, N)
    if not records:
        raise InputError(f"{path}: no pairs")
    return load_pairs(records, path.parent)


def _read_config(path):
    """Model config and schedule from a JSON file ``{"model": {...}, "schedule": {...}}``."""
    if path is None:
        return ModelConfig(), {}
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read config ({exc})") from None
    model = d.get("model", {k: v for k, v in d.items() if k != "schedule"})
    return ModelConfig.from_dict(model), d.get("schedule", {})


def _schedule(args, base: dict) -> Schedule:
    fields = dict(base)
    for name in ("epochs", "lr", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            fields[name] = v
    try:
        return Schedule(**fields)
    except TypeError as exc:
        raise InputError(f"bad schedule: {exc}") from None


def _evaluate(params, config, objective, data, threshold=4):
    s_p, _ = predict_pairs(params, config, data, objective)
    return eval_report(s_p, data.levels, config.N, threshold)


# ----------------------------------------------------------------------------
# commands; each returns (inputs, outputs, extra manifest fields)


def cmd_pdf_solve(args):
    grid = LevelGrid(args.max_level)
    pdf = solve(PdfFamily(args.family, args.amplitude), args.level, grid)
    _write_json(args.out, pdf.to_dict(), exact=True)
    return [], [args.out], {}


def cmd_synth_gen(args):
    weights = None
    if args.level_weights:
        weights = tuple(float(x) for x in args.level_weights.split(","))
    cfg = SynthConfig(size=args.size, N=args.max_level, cell=args.cell, noise_std=args.noise_std,
                      seed=args.seed, level_weights=weights, retain=args.retain)
    out = Path(args.out)
    records = write_dataset(cfg, args.n_pairs, out)
    outputs = [out]
    if args.split:
        tr, te = split(records, args.split, args.seed)
        write_annotations(tr, out / "train.jsonl")
        write_annotations(te, out / "test.jsonl")
    return [], outputs, {"synth_config": {**cfg.__dict__, "level_weights": weights}}


def cmd_train(args):
    config, sched = _read_config(args.config)
    data = _load_annotated(args.data, config.N)
    objective = ObjectiveSpec.from_name(args.objective, amplitude=args.amplitude, tau=args.tau)
    schedule = _schedule(args, sched)
    t0 = time.perf_counter()
    result = train(config, data, objective, schedule, seed=args.seed)
    elapsed = time.perf_counter() - t0
    checkpoint.save(args.out, result.params, config, objective,
                    meta={"seed": args.seed, "schedule": schedule.to_dict(), "n_train": len(data)})
    log_path = Path(str(args.out) + ".log.json")
    _write_json(log_path, {"epoch_losses": result.epoch_losses, "steps": result.steps,
                           "skipped_batches": result.skipped_batches})
    inputs = [args.data] + ([args.config] if args.config else [])
    return inputs, [args.out, log_path], {"train_seconds": elapsed}


def cmd_eval(args):
    params, config, objective, _ = checkpoint.load(args.model)
    data = _load_annotated(args.data, config.N)
    report = _evaluate(params, config, objective, data, args.threshold)
    _write_json(args.out, report)
    return [args.model, args.data], [args.out], {}


def cmd_index_build(args):
    params, config, _, _ = checkpoint.load(args.model)
    files, images = _load_images(args.images)
    sets = encode(params, config, images)
    build_store(list(range(len(files))), sets, args.out)
    id_map = Path(str(args.out) + ".ids.json")
    _write_json(id_map, {str(i): f.name for i, f in enumerate(files)})
    return [args.model, args.images], [args.out, id_map], {}


def cmd_scan(args):
    params, config, _, _ = checkpoint.load(args.model)
    store = read_store(args.index)
    if store.N != config.N or store.dim != config.embed_dim:
        raise InputError(f"store holds N={store.N}, dim={store.dim}; model has "
                         f"N={config.N}, dim={config.embed_dim}")
    files, images = _load_images(args.queries)
    encode(params, config, images[:1])  # warm-up
    t0 = time.perf_counter()
    sets = encode(params, config, images)
    enc = (time.perf_counter() - t0) / len(images)
    report = scan(sets, store, args.threshold, args.threads, encode_s_per_img=enc)
    for entry, f in zip(report["best"], files):
        entry["query"] = f.name
    _write_json(args.out, report)
    return [args.model, args.index, args.queries], [args.out], {}


def report_token_heatmap(params) -> np.ndarray:
    """Cosine matrix of the initial class tokens ``C0``."""
    c = np.asarray(params["cls"], dtype=np.float64)
    c = c / np.linalg.norm(c, axis=-1, keepdims=True)
    m = np.clip(c @ c.T, -1.0, 1.0)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return m


def report_pair_distribution(params, config, objective, real, gen, level) -> dict:
    """Target pdf ``g`` for ``level`` next to the predicted ``softmax(h / tau)``."""
    objective = objective or ObjectiveSpec("kl")
    sets = encode(params, config, np.stack([real, gen]))
    h = predict_raw(sets[0], sets[1])
    spec = objective if objective.kind == "kl" else ObjectiveSpec("kl", tau=objective.tau)
    g = targets_for(spec, [level], config.N)[0]
    return {"level": int(level), "family": spec.family, "A": spec.amplitude, "tau": objective.tau,
            "g": g.tolist(), "h_norm": normalize_h(h, objective.tau).tolist(), "h": h.tolist(),
            "predicted_level": int(level_from_h(h))}


def cmd_report_heatmap(args):
    params, _, _, _ = checkpoint.load(args.model)
    m = report_token_heatmap(params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [f"c{j}" for j in range(len(m))])
        for i, row in enumerate(m):
            w.writerow([f"c{i}"] + [repr(float(x)) for x in row])
    return [args.model], [args.out], {}


def cmd_report_pair(args):
    params, config, objective, _ = checkpoint.load(args.model)
    if not 0 <= args.level <= config.N:
        raise InputError(f"level {args.level} outside [0, {config.N}]")
    out = report_pair_distribution(params, config, objective, read_image(args.real),
                                   read_image(args.gen), args.level)
    _write_json(args.out, out)
    return [args.model, args.real, args.gen], [args.out], {}


def cmd_sweep(args):
    config, sched = _read_config(args.config)
    data = _load_annotated(args.data, config.N)
    test = _load_annotated(args.test, config.N)
    schedule = _schedule(args, sched)
    rows = []
    for a in (float(x) for x in args.amplitudes.split(",")):
        objective = ObjectiveSpec("kl", family=args.family, amplitude=a, tau=args.tau)
        result = train(config, data, objective, schedule, seed=args.seed)
        rep = _evaluate(result.params, config, objective, test)
        rows.append({"A": a, "pcc": rep["pcc"], "rd": rep["rd"]})
        log.info("A=%g pcc=%s rd=%.4f", a, rep["pcc"], rep["rd"])
    _write_json(args.out, {"family": objective.family, "rows": rows})
    csv_path = Path(str(args.out) + ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["A", "pcc", "rd"])
        w.writeheader()
        w.writerows(rows)
    return [args.data, args.test], [args.out, csv_path], {}


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pdfembed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(parent, name, fn, **kw):
        sp = parent.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    pdf = sub.add_parser("pdf").add_subparsers(dest="sub", required=True)
    sp = add(pdf, "solve", cmd_pdf_solve, help="supervision pdf for one level")
    sp.add_argument("--family", required=True, choices=["gaussian", "linear", "exp", "exponential"])
    sp.add_argument("--amplitude", type=float, required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--max-level", type=int, default=5)

    synth = sub.add_parser("synth").add_subparsers(dest="sub", required=True)
    sp = add(synth, "gen", cmd_synth_gen, help="write a synthetic pair dataset")
    sp.add_argument("--n-pairs", type=int, required=True)
    sp.add_argument("--max-level", type=int, default=5)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--cell", type=int, default=4)
    sp.add_argument("--noise-std", type=float, default=0.05)
    sp.add_argument("--level-weights", help="comma-separated N+1 level proportions")
    sp.add_argument("--retain", choices=["nested", "random"], default="nested")
    sp.add_argument("--split", type=float, help="also write train.jsonl/test.jsonl at this fraction")

    def train_flags(sp):
        sp.add_argument("--config", help="JSON with optional 'model' and 'schedule' objects")
        sp.add_argument("--data", required=True, help="training annotations (JSONL)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--tau", type=float, default=0.1)

    sp = add(sub, "train", cmd_train, help="train an encoder")
    train_flags(sp)
    sp.add_argument("--objective", choices=NAMES, default="kl-exp")
    sp.add_argument("--amplitude", type=float)

    sp = add(sub, "eval", cmd_eval, help="PCC/RD report on annotated pairs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=int, default=4)

    index = sub.add_parser("index").add_subparsers(dest="sub", required=True)
    sp = add(index, "build", cmd_index_build, help="encode a directory of images into a store")
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", required=True)

    sp = add(sub, "scan", cmd_scan, help="match query images against a store")
    sp.add_argument("--model", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--threshold", type=int, default=4)

    report = sub.add_parser("report").add_subparsers(dest="sub", required=True)
    sp = add(report, "heatmap", cmd_report_heatmap, help="class-token cosine matrix as CSV")
    sp.add_argument("--model", required=True)
    sp = add(report, "pair", cmd_report_pair, help="target and predicted distributions for one pair")
    sp.add_argument("--model", required=True)
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--level", type=int, required=True)

    sp = add(sub, "sweep", cmd_sweep, help="train and evaluate once per amplitude")
    train_flags(sp)
    sp.add_argument("--test", required=True, help="evaluation annotations (JSONL)")
    sp.add_argument("--amplitudes", required=True, help="comma-separated values of A")
    sp.add_argument("--family", default="exponential", choices=["gaussian", "linear", "exp", "exponential"])
    return p


def _fail(exc, code) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    step = getattr(exc, "step", None)
    if step is not None:
        err["step"] = step
    index = getattr(exc, "index", None)
    if index is not None:
        err["index"] = index
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        inputs, outputs, extra = args.fn(args)
    except PdfEmbedError as exc:
        return _fail(exc, exc.exit_code if exc.exit_code in (2, 3) else 3)
    except NumericalError as exc:
        return _fail(exc, 3)
    except (ValueError, OSError, KeyError) as exc:
        return _fail(exc, 2)
    except ArithmeticError as exc:
        return _fail(exc, 3)
    flags = {k: v for k, v in vars(args).items() if k != "fn"}
    manifest = {
        "command": " ".join(x for x in (args.command, getattr(args, "sub", None)) if x),
        "flags": flags,
        "seed": args.seed,
        "versions": {"pdfembed": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        "wall_seconds": time.perf_counter() - t0,
        **extra,
    }
    _write_json(Path(str(args.out) + ".manifest.json"), manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
