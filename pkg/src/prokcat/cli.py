"""``prokcat`` command-line interface.

Exit codes: 0 success, 1 internal error, 2 bad input or path, 3 incompatible
checkpoint.  Failures print one line ``prokcat: error: <kind>: <message>`` to
stderr.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from prokcat import __version__
from prokcat import data as D
from prokcat import pipeline as P
from prokcat.encoders import EmbeddingFileError, read_embeddings, write_embeddings
from prokcat.fingerprint import DEFAULT_BITS, DEFAULT_RADIUS, ecfp
from prokcat.smiles import SmilesError, parse_smiles
from prokcat.symbolic import SymbolicFormula, extract_formula

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CHECKPOINT = 0, 1, 2, 3

# keys accepted in a JSON config besides the ModelConfig fields
RUN_KEYS = {
    "data": None, "embeddings": None, "checkpoint": None, "input": None, "out": "out",
    "seeds": 1, "oversample": True, "d_values": [16, 32, 64, 128, 256],
}
MODEL_KEYS = {f for f in P.ModelConfig().to_dict()}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def bad_input(message: str) -> CliError:
    return CliError(EXIT_INPUT, "bad-input", message)


class Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def warn(self, msg: str) -> None:
        print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- config

def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise bad_input(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise bad_input(f"config {p} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise bad_input(f"config {p} must hold a JSON object")
    unknown = sorted(set(doc) - MODEL_KEYS - set(RUN_KEYS))
    if unknown:
        raise bad_input(f"unknown config key(s) in {p}: {', '.join(unknown)}")
    return doc


def effective_config(args) -> dict:
    """File values, then command-line overrides, then defaults."""
    cfg = dict(RUN_KEYS)
    cfg.update(load_config_file(args.config))
    for key in list(MODEL_KEYS) + list(RUN_KEYS):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg.setdefault("seed", 0)
    return cfg


def model_config(cfg: dict) -> P.ModelConfig:
    try:
        return P.ModelConfig.from_dict({k: v for k, v in cfg.items() if k in MODEL_KEYS})
    except P.ConfigError as exc:
        raise bad_input(str(exc)) from None


def require_file(cfg: dict, key: str) -> Path:
    if not cfg.get(key):
        raise bad_input(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    p = Path(cfg[key])
    if not p.is_file():
        raise bad_input(f"{key} file not found: {p}")
    return p


def out_dir(cfg: dict) -> Path:
    p = Path(cfg["out"])
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise bad_input(f"cannot create output directory {p}: {exc.strerror}") from None
    return p


def echo_config(out: Path, cfg: dict, command: str) -> None:
    doc = {"command": command, "version": __version__, **cfg}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_embeddings(cfg: dict, console: Console):
    if not cfg.get("embeddings"):
        return None
    p = require_file(cfg, "embeddings")
    width, table = read_embeddings(p)
    console.info(f"loaded {len(table)} residue embeddings of width {width} from {p}")
    return table


def load_records(cfg: dict, console: Console) -> list[D.KineticRecord]:
    path = require_file(cfg, "data")
    records, errors = D.load_dataset(path)
    for e in errors:
        console.warn(f"{path}: {e}")
    if not records:
        raise bad_input(f"{path}: no valid records")
    return records


def prepare_splits(cfg: dict, console: Console) -> D.DatasetSplits:
    raw = load_records(cfg, console)
    deduped = D.deduplicate(raw)
    records = D.oversample_temperature(deduped, seed=cfg["seed"]) if cfg["oversample"] else deduped
    splits = D.split(records, seed=cfg["seed"])
    splits.counts.update({"raw": len(raw), "deduped": len(deduped), "oversampled": len(records)})
    console.info("records: " + ", ".join(f"{k}={v}" for k, v in sorted(splits.counts.items())))
    return splits


def ext_width_of(table, cfg: dict) -> dict:
    if table:
        width = next(iter(table.values())).shape[1]
        if cfg.get("ext_width") not in (None, width):
            raise bad_input(f"embedding width {width} does not match ext_width {cfg['ext_width']}")
        cfg["ext_width"] = width
    return cfg


# ---------------------------------------------------------------- reports

def _num(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


METRIC_COLS = ("rmse", "pcc", "mae", "r2")


def write_table(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(c) for c in r) + "\n")


def write_text_table(path: Path, header, rows, title: str | None = None) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title] if title else []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if k else c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    text = "\n".join(lines) + "\n"
    path.write_text(text, encoding="utf-8")
    return text


def metric_rows(per_seed: list[tuple[int, dict[str, P.Metrics]]]):
    rows = []
    for seed, by_split in per_seed:
        for split in ("train", "validation", "test"):
            m = by_split[split]
            rows.append([str(seed), split] + [_num(getattr(m, c)) for c in METRIC_COLS] + [str(m.n)])
    if len(per_seed) > 1:
        for split in ("train", "validation", "test"):
            for stat, fn in (("mean", np.mean), ("std", lambda v: np.std(v, ddof=1))):
                vals = []
                for c in METRIC_COLS:
                    xs = [getattr(bs[split], c) for _, bs in per_seed]
                    vals.append(_num(None if any(x is None for x in xs) else float(fn(xs))))
                rows.append([stat, split] + vals + [str(per_seed[0][1][split].n)])
    return rows


# ---------------------------------------------------------------- commands

def cmd_train(args, console: Console) -> int:
    cfg = effective_config(args)
    embeddings = load_embeddings(cfg, console)
    cfg = ext_width_of(embeddings, cfg)
    mcfg = model_config(cfg)
    seeds = int(cfg["seeds"])
    if seeds < 1:
        raise bad_input("seeds must be >= 1")
    splits = prepare_splits(cfg, console)
    out = out_dir(cfg)
    echo_config(out, {**cfg, **mcfg.to_dict()}, "train")
    configs = [mcfg.replace(seed=mcfg.seed + k) for k in range(seeds)]
    models = P.train_many(splits, configs, embeddings, log=console.info)
    per_seed, hist_rows = [], []
    for c, model in zip(configs, models):
        by_split = {"train": P.evaluate(model, splits.train, embeddings),
                    "validation": P.evaluate(model, splits.validation, embeddings),
                    "test": P.evaluate(model, splits.test, embeddings)}
        per_seed.append((c.seed, by_split))
        name = "model.ckpt" if seeds == 1 else f"model_seed{c.seed}.ckpt"
        P.save_checkpoint(model, out / name)
        for h in model.history:
            hist_rows.append([c.seed, h["epoch"], f"{h['train_rmse']:.6f}", f"{h['val_rmse']:.6f}"])
    if seeds > 1:
        P.save_checkpoint(models[0], out / "model.ckpt")
    write_table(out / "history.tsv", ["seed", "epoch", "train_rmse", "val_rmse"], hist_rows)
    header = ["seed", "split", *METRIC_COLS, "n"]
    rows = metric_rows(per_seed)
    write_table(out / "metrics.tsv", header, rows)
    text = write_text_table(out / "metrics.txt", header, rows, title=f"ProKcat-{'M' if mcfg.head == 'mlp' else 'K'}")
    if not console.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def load_model(cfg: dict) -> P.TrainedModel:
    return P.load_checkpoint(require_file(cfg, "checkpoint"))


PREDICT_REQUIRED = ("id", "sequence", "smiles", "temperature_c")


def read_prediction_rows(path: Path):
    """Yield ``(line, record or error message)`` from a TSV with at least the required columns."""
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return
    header = lines[0].rstrip("\r").split("\t")
    missing = [c for c in PREDICT_REQUIRED if c not in header]
    if missing:
        raise bad_input(f"{path}: header lacks column(s): {', '.join(missing)}")
    col = {c: header.index(c) for c in header}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        f = line.split("\t")
        get = lambda c: f[col[c]] if c in col and col[c] < len(f) else ""  # noqa: E731
        try:
            if any(not get(c) for c in PREDICT_REQUIRED):
                raise D.DatasetError("missing required field")
            kcat = get("kcat_s")
            rec = D.KineticRecord(get("id"), get("sequence"), get("smiles"), float(get("temperature_c")),
                                  float(kcat) if kcat else 1.0, get("ec_number") or None)
            D.validate_record(rec)
            yield lineno, rec
        except (D.DatasetError, ValueError) as exc:
            yield lineno, str(exc)


def cmd_predict(args, console: Console) -> int:
    cfg = effective_config(args)
    model = load_model(cfg)
    embeddings = load_embeddings(cfg, console)
    if embeddings is None and not model.config.no_ext_embedding:
        console.warn("no --embeddings given; residue embeddings are taken as zeros")
    src = require_file(cfg, "input")
    out = out_dir(cfg)
    echo_config(out, cfg, "predict")
    ok, failed, rows = 0, 0, []
    for lineno, item in read_prediction_rows(src):
        if isinstance(item, str):
            print(f"error\t{src}:{lineno}\t{item}", file=sys.stderr)
            failed += 1
            continue
        try:
            y, flag = P.predict(model, item, embeddings)
        except P.FeatureError as exc:
            print(f"error\t{src}:{lineno}\t{exc}", file=sys.stderr)
            failed += 1
            continue
        rows.append([item.id, repr(y), repr(10.0 ** y), "1" if flag else "0"])
        ok += 1
    write_table(out / "predictions.tsv", ["id", "log10_kcat", "kcat_s", "out_of_range"], rows)
    console.info(f"predicted {ok} record(s), {failed} error(s)")
    if failed and not ok:
        raise bad_input(f"no row of {src} could be predicted")
    return EXIT_OK


def cmd_extract_formula(args, console: Console) -> int:
    cfg = effective_config(args)
    model = load_model(cfg)
    if model.config.head != "kan":
        raise CliError(EXIT_CHECKPOINT, "incompatible-checkpoint",
                       "formula extraction needs a KAN-head checkpoint (this one has an MLP head)")
    out = out_dir(cfg)
    echo_config(out, cfg, "extract-formula")
    names = P.kan_input_names(model.config)
    formula = extract_formula(model.kan_network(), names, model.stats.kan_domains)
    text = "log10_kcat = " + formula.render()
    (out / "formula.txt").write_text(text + "\n", encoding="utf-8")
    (out / "formula.json").write_text(json.dumps(formula.to_dict(), indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    rows = [[l, j, i, names[i] if l == 0 else f"z{l}_{i}", f.primitive, f"{f.a:.6g}", f"{f.b:.6g}",
             f"{f.c:.6g}", f"{f.e:.6g}", f"{f.r2:.6f}", f"{f.rmse:.6g}"]
            for (l, j, i), f in sorted(formula.edge_fits.items())]
    write_table(out / "edges.tsv", ["layer", "out", "in", "input", "primitive", "a", "b", "c", "e", "r2", "rmse"],
                rows)
    if cfg.get("input") or cfg.get("data"):
        key = "input" if cfg.get("input") else "data"
        records = [r for _, r in read_prediction_rows(require_file(cfg, key)) if not isinstance(r, str)]
        embeddings = load_embeddings(cfg, console)
        examples = [P.featurize(r, embeddings) for r in records]
        pred, _ = P.predict_examples(model, examples)
        X = P.kan_input_matrix(model, examples) if examples else np.zeros((0, len(names)))
        fval = formula.evaluate(X)[:, 0] if examples else np.zeros(0)
        write_table(out / "formula_eval.tsv", ["id", "model_log10_kcat", "formula_log10_kcat"],
                    [[r.id, repr(float(a)), repr(float(b))] for r, a, b in zip(records, pred, fval)])
    print(text)
    return EXIT_OK


def cmd_analyze(args, console: Console) -> int:
    cfg = effective_config(args)
    records = load_records(cfg, console)
    out = out_dir(cfg)
    echo_config(out, cfg, "analyze")
    results = D.ec_class_correlation(records)
    if not results:
        console.warn("no records carry an EC number in classes 1-6; the table is empty")
    rows = []
    for r in results:
        if r.insufficient:
            rows.append([r.ec_class, r.n, "insufficient", "insufficient", "insufficient"])
        else:
            rows.append([r.ec_class, r.n, f"{r.pearson_r:.6f}", f"{r.p_value:.6g}", "yes" if r.significant else "no"])
    header = ["ec_class", "n", "pearson_r", "p_value", "significant"]
    write_table(out / "ec_correlation.tsv", header, rows)
    text = write_text_table(out / "ec_correlation.txt", header, rows, title="temperature vs log10 kcat")
    if not console.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args, console: Console) -> int:
    cfg = effective_config(args)
    embeddings = load_embeddings(cfg, console)
    cfg = ext_width_of(embeddings, cfg)
    d_values = sorted({int(v) for v in cfg["d_values"]})
    if not d_values or min(d_values) < 1:
        raise bad_input("d_values must list positive integers")
    base = model_config(cfg)
    splits = prepare_splits(cfg, console)
    out = out_dir(cfg)
    echo_config(out, {**cfg, "d_values": d_values}, "sweep")
    configs = [base.replace(d=d) for d in d_values]
    models = P.train_many(splits, configs, embeddings, log=console.info)
    rows = []
    for c, m in zip(configs, models):
        met = P.evaluate(m, splits.test, embeddings)
        rows.append([c.d] + [_num(getattr(met, k)) for k in METRIC_COLS] + [m.best_epoch, m.param_count()])
    header = ["d", *METRIC_COLS, "best_epoch", "params"]
    write_table(out / "sweep.tsv", header, rows)
    text = write_text_table(out / "sweep.txt", header, rows, title="test metrics by latent width")
    if not console.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def _input_lines(args) -> list[str]:
    if args.strings:
        return list(args.strings)
    if args.input:
        p = Path(args.input)
        if not p.is_file():
            raise bad_input(f"input file not found: {p}")
        text = p.read_text(encoding="utf-8")
    else:
        text = sys.stdin.read()
    return [ln.rstrip("\r") for ln in text.split("\n") if ln.strip()]


def _per_line(args, fn) -> int:
    lines = _input_lines(args)
    ok = 0
    for n, line in enumerate(lines, start=1):
        smi = line.strip()
        try:
            print(f"{smi}\t{fn(smi)}")
            ok += 1
        except SmilesError as exc:
            print(f"error\tline {n}\t{exc}")
    if lines and not ok:
        raise bad_input("no input line could be parsed")
    return EXIT_OK


def cmd_fingerprint(args, console: Console) -> int:
    if args.bits <= 0 or args.bits & (args.bits - 1) or args.bits % 4:
        raise bad_input("--bits must be a power of two and at least 4")
    if args.radius < 0:
        raise bad_input("--radius must be >= 0")
    return _per_line(args, lambda s: ecfp(parse_smiles(s), args.radius, args.bits).to_hex())


def graph_summary(smiles: str) -> str:
    g = parse_smiles(smiles)
    aromatic = sum(a.aromatic for a in g.atoms)
    ring = sum(a.ring_member for a in g.atoms)
    return f"atoms={g.n_atoms} bonds={len(g.bonds)} aromatic={aromatic} ring_atoms={ring}"


def cmd_parse(args, console: Console) -> int:
    return _per_line(args, graph_summary)


def cmd_synth(args, console: Console) -> int:
    cfg = effective_config(args)
    if args.n < 1:
        raise bad_input("--n must be >= 1")
    out = out_dir(cfg)
    records = D.generate_synthetic(args.n, seed=cfg["seed"], n_families=args.families, sigma=args.sigma)
    D.write_dataset(out / "dataset.tsv", records)
    write_embeddings(out / "embeddings.pemb", D.synthetic_embeddings([r.sequence for r in records],
                                                                     seed=cfg["seed"]))
    console.info(f"wrote {len(records)} records to {out / 'dataset.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise bad_input(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat keys)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", help="dataset TSV")
    model.add_argument("--embeddings", help="PEMB1 residue-embedding file")
    model.add_argument("--head", choices=["mlp", "kan"])
    model.add_argument("--kan-mode", dest="kan_mode", choices=["frozen", "joint"])
    model.add_argument("--d", type=int)
    model.add_argument("--heads", type=int)
    model.add_argument("--mlp-hidden", dest="mlp_hidden", type=_int_list)
    model.add_argument("--kan-widths", dest="kan_widths", type=_int_list)
    model.add_argument("--lr", type=float)
    model.add_argument("--batch-size", dest="batch_size", type=int)
    model.add_argument("--epochs", type=int)
    model.add_argument("--patience", type=int)
    model.add_argument("--oversample", type=_bool)
    for flag in P.ABLATION_FLAGS:
        model.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_const", const=True)

    parser = _Parser(prog="prokcat", description="Temperature-aware kcat prediction.")
    parser.add_argument("--version", action="version", version=f"prokcat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common, model], help="train a model and report metrics")
    p.add_argument("--seeds", type=int, help="number of seeded runs (reports mean and std)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict kcat for a TSV of records")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("extract-formula", parents=[common], help="symbolic formula from a KAN checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="optional TSV to evaluate formula against the model")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_extract_formula)

    p = sub.add_parser("analyze", parents=[common], help="per-EC-class temperature correlation")
    p.add_argument("--data")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", parents=[common, model], help="train across latent widths d")
    p.add_argument("--d-values", dest="d_values", type=_int_list)
    p.set_defaults(func=cmd_sweep)

    for name, fn, text in (("fingerprint", cmd_fingerprint, "hex ECFP per SMILES line"),
                           ("parse", cmd_parse, "graph summary per SMILES line")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("strings", nargs="*", help="SMILES strings (default: --input file or stdin)")
        p.add_argument("--input")
        if name == "fingerprint":
            p.add_argument("--bits", type=int, default=DEFAULT_BITS)
            p.add_argument("--radius", type=int, default=DEFAULT_RADIUS)
        p.set_defaults(func=fn)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic Arrhenius dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--families", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    console = Console(quiet=False)
    try:
        args = build_parser().parse_args(argv)
        console.quiet = args.quiet
        return args.func(args, console)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except P.CheckpointError as exc:
        code, kind, msg = EXIT_CHECKPOINT, "incompatible-checkpoint", str(exc)
    except (D.DatasetError, P.ConfigError, P.FeatureError, EmbeddingFileError, SmilesError) as exc:
        code, kind, msg = EXIT_INPUT, "bad-input", str(exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        code, kind, msg = EXIT_INPUT, "bad-path", f"{exc.strerror}: {exc.filename}"
    except P.TrainingError as exc:
        code, kind, msg = EXIT_INTERNAL, "training-failed", str(exc)
    except Exception as exc:  # noqa: BLE001
        code, kind, msg = EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}"
    print(f"prokcat: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
