"""Command line: gen-synthetic, train, eval, grid, explain, and replay from a manifest.

Settings resolve as built-in defaults, then a JSON ``--config`` file, then
explicit flags. Every command writes ``manifest.json`` into its output
directory with the resolved settings and the sha256 of each input and
output file; ``replay`` re-runs a manifest and can verify the hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, ScriptFuseError
from .explainer import MAX_EXACT_WORDS, explain, html_document, render_text_plot
from .model import ABLATIONS, load_model, predict_proba, save_model
from .plotting import plot_confusion, plot_layer_curve, plot_loss_curves
from .text import (
    LABELS, SPLITS, ScriptPairExample, gen_synthetic, load_dataset, load_lexicon, oracle_report, save_dataset,
    toy_transliterate,
)
from .trainer import (
    TrainConfig, best_layer, classification_report, grid_search, layer_curve, run_experiment,
    write_grid_summary,
)

log = logging.getLogger("scriptfuse")

TRAIN_FIELDS = {f.name: f.default for f in fields(TrainConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-synthetic": {"seed": 0, "size": 1000, "cue_placement": "deva_advantaged"},
    "train": {**TRAIN_FIELDS, "data": None},
    "eval": {"seed": 0, "model": None, "data": None, "split": "test"},
    "grid": {**TRAIN_FIELDS, "data": None, "grid": None, "sweep_layer": False, "workers": 1},
    "explain": {"seed": 0, "model": None, "data": None, "split": "test", "index": None, "sentence": None,
                "deva": None, "sampled": False, "permutations": 1000, "class_index": None, "format": "ansi",
                "compare_baseline": None},
}
REQUIRED = {"train": ["data"], "eval": ["model", "data"], "grid": ["data"], "explain": ["model"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for name, default in TRAIN_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if name == "seed":
            continue
        if isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction)
        elif name == "ablation":
            p.add_argument(flag, choices=ABLATIONS)
        elif name == "query_script":
            p.add_argument(flag, choices=("roman", "deva"))
        elif name == "pooling":
            p.add_argument(flag, choices=("mean", "cls"))
        elif name == "learning_rate":
            p.add_argument(flag, "--lr", dest=name, type=float)
        else:
            p.add_argument(flag, type=type(default))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scriptfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", type=Path, help="JSON settings file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        return p

    p = command("gen-synthetic", "write a synthetic two-script corpus")
    p.add_argument("--size", type=int, help="training split size; validation and test get half each")
    p.add_argument("--cue-placement", choices=("roman_only", "deva_advantaged", "mixed"))

    p = command("train", "train one model (or ablation) and save it")
    p.add_argument("--data", help="directory with train/validation/test TSVs")
    _add_train_flags(p)

    p = command("eval", "score a saved model on one split")
    p.add_argument("--model", help="model directory written by train")
    p.add_argument("--data")
    p.add_argument("--split", choices=SPLITS)

    p = command("grid", "grid search or alignment-layer sweep")
    p.add_argument("--data")
    p.add_argument("--grid", help="JSON file mapping setting name to a list of values")
    p.add_argument("--sweep-layer", action="store_true", help="one run per alignment layer 1..num_layers")
    p.add_argument("--workers", type=int)
    _add_train_flags(p)

    p = command("explain", "Shapley word attributions for one sentence")
    p.add_argument("--model")
    p.add_argument("--sentence", help="roman words separated by spaces")
    p.add_argument("--deva", help="Devanagari words; transliterated from --sentence when omitted")
    p.add_argument("--data", help="dataset directory, used with --index")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--index", type=int)
    p.add_argument("--sampled", action="store_true")
    p.add_argument("--permutations", type=int)
    p.add_argument("--class", dest="class_index", type=int, choices=range(len(LABELS)))
    p.add_argument("--format", choices=("ansi", "html"))
    p.add_argument("--compare-baseline", help="baseline model directory to explain alongside")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: the manifest's own)")
    p.add_argument("--check", action="store_true", help="fail unless every output hash matches")
    return parser


# ---------------------------------------------------------------------------
# settings and manifests


def _flatten(data: dict[str, Any]) -> dict[str, Any]:
    """Lift one level of sections (``{"model": {"d_model": 32}}``) to top-level keys."""
    out = {}
    for key, value in data.items():
        if isinstance(value, dict) and key != "grid":
            out.update(value)
        else:
            out[key] = value
    return out


def resolve_settings(command: str, args: argparse.Namespace) -> dict[str, Any]:
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose")}
    if getattr(args, "config", None) is not None:
        try:
            from_file = _flatten(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        unknown = sorted(set(from_file) - set(settings))
        if unknown:
            raise ConfigError(f"unknown settings in {args.config}: {unknown}")
        settings.update(from_file)
    settings.update(flags)
    if command == "grid" and isinstance(settings["grid"], str):
        settings["grid"] = json.loads(Path(settings["grid"]).read_text(encoding="utf-8"))
    for key in REQUIRED.get(command, []):
        if settings[key] is None:
            raise ConfigError(f"{command} needs --{key}")
    return settings


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, settings: dict, inputs: list[Path], report: dict) -> dict:
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "version": __version__,
        "seed": settings.get("seed"),
        "config": settings,
        "inputs": {str(p): sha256(p) for p in sorted(set(inputs))},
        "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in artifacts},
        "report": report,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# commands; each returns (input files, report) and writes into ``out``


def _train_config(settings: dict) -> TrainConfig:
    cfg = TrainConfig.from_dict({k: settings[k] for k in TRAIN_FIELDS})
    return cfg.with_ablation(cfg.ablation)


def _load_splits(data) -> tuple[dict[str, list[ScriptPairExample]], list[Path]]:
    data = Path(data)
    if not data.is_dir():
        raise DataError(f"dataset directory {data} not found")
    splits = {s: load_dataset(data, s) for s in SPLITS}
    return splits, [data / f"{s}.tsv" for s in SPLITS]


def _model_dir(path) -> Path:
    path = Path(path)
    if (path / "model" / "model.ckpt").exists():
        return path / "model"
    if not (path / "model.ckpt").exists():
        raise FileNotFoundError(f"no checkpoint under {path}")
    return path


def cmd_gen_synthetic(s: dict, out: Path):
    splits = gen_synthetic(s["size"], s["seed"], s["cue_placement"])
    for name, rows in splits.items():
        save_dataset(out / f"{name}.tsv", rows)
    lines = ["roman\tphonemic\tdeva\trole\tkind"]
    lines += [f"{e.roman}\t{e.phonemic}\t{e.deva}\t{e.role}\t{e.kind}" for e in load_lexicon()]
    (out / "lexicon.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rep = oracle_report(splits)
    rep["deva_minus_roman"] = rep["deva_ceiling"] - rep["roman_ceiling"]
    rep["sizes"] = {k: len(v) for k, v in splits.items()}
    print(f"wrote {sum(rep['sizes'].values())} sentences to {out}; oracle ceilings "
          f"roman={rep['roman_ceiling']:.4f} deva={rep['deva_ceiling']:.4f}")
    return [], {"oracle": rep}


def cmd_train(s: dict, out: Path):
    cfg = _train_config(s)
    # the manifest records the weights the ablation actually trains with
    s.update(cfg.to_dict())
    splits, inputs = _load_splits(s["data"])
    model, result, vocabs = run_experiment(cfg, splits)
    save_model(out / "model", model, cfg, vocabs)
    (out / "run_result.json").write_text(result.to_json() + "\n", encoding="utf-8")
    plot_loss_curves(result.epochs, out / "loss_curves.png")
    print(f"{cfg.ablation}: best epoch {result.best_epoch}/{result.stopped_epoch} "
          f"val F1 {result.best_val_f1:.4f} test F1 {result.test_f1:.4f}")
    return inputs, {"test_f1": result.test_f1, "best_val_f1": result.best_val_f1,
                    "final_reg_emd": result.final_reg_emd}


def cmd_eval(s: dict, out: Path):
    mdir = _model_dir(s["model"])
    model, cfg, vocabs = load_model(mdir)
    data = Path(s["data"])
    rows = load_dataset(data, s["split"]) if data.is_dir() else load_dataset(data)
    src = data / f"{s['split']}.tsv" if data.is_dir() else data
    if not rows:
        raise DataError(f"{src} holds no examples")
    probs = predict_proba(model, rows, vocabs, cfg.max_len)
    rep = classification_report(probs.argmax(axis=1), [ex.label_id for ex in rows])
    rep["labels"] = list(LABELS)
    rep["split"] = s["split"]
    _write_json(out / "metrics.json", rep)
    plot_confusion(rep["confusion"], LABELS, out / "confusion.png")
    print(f"weighted F1 {rep['weighted_f1']:.4f} on {len(rows)} examples")
    print("class\tprecision\trecall\tf1\tsupport")
    for i, name in enumerate(LABELS):
        print(f"{name}\t{rep['precision'][i]:.4f}\t{rep['recall'][i]:.4f}\t{rep['f1'][i]:.4f}\t{rep['support'][i]}")
    return [src, mdir / "model.ckpt"], {"weighted_f1": rep["weighted_f1"]}


def cmd_grid(s: dict, out: Path):
    base = TrainConfig.from_dict({k: s[k] for k in TRAIN_FIELDS})
    if s["sweep_layer"]:
        if s["grid"]:
            raise ConfigError("--sweep-layer varies only the alignment layer; drop --grid")
        grid = {"align_layer": list(range(1, base.num_layers + 1))}
    else:
        grid = s["grid"] or {}
    if not isinstance(grid, dict) or not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("grid must map at least one setting to a non-empty list")
    unknown = sorted(set(grid) - set(TRAIN_FIELDS))
    if unknown:
        raise ConfigError(f"grid names unknown settings: {unknown}")
    splits, inputs = _load_splits(s["data"])
    ranked = grid_search(base, grid, splits, out, workers=s["workers"])
    keys = list(grid)
    write_grid_summary(out / "summary.tsv", ranked, keys)
    print((out / "summary.tsv").read_text(encoding="utf-8"), end="")
    summary = {"grid": grid, "ranked": [
        {"cell": r["index"], "params": r["params"], "status": r["status"],
         **({"best_val_f1": r["result"]["best_val_f1"], "test_f1": r["result"]["test_f1"]}
            if r["status"] == "ok" else {"error": r["error"]})} for r in ranked]}
    if ranked and ranked[0]["status"] == "ok":
        summary["best"] = summary["ranked"][0]
    if s["sweep_layer"]:
        curve = layer_curve(ranked)
        if not curve:
            raise DataError("every layer-sweep cell failed")
        summary["best_layer"] = best_layer(curve)
        summary["curve"] = curve
        lines = ["layer\tval_f1\ttest_f1"] + [f"{r['layer']}\t{r['val_f1']!r}\t{r['test_f1']!r}" for r in curve]
        (out / "layer_curve.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        plot_layer_curve(curve, out / "layer_curve.png", summary["best_layer"])
        print(f"best layer {summary['best_layer']}")
    _write_json(out / "summary.json", summary)
    return inputs, {"best": summary.get("best"), "best_layer": summary.get("best_layer")}


def _explain_example(s: dict) -> tuple[ScriptPairExample, list[Path]]:
    if s["sentence"] is not None:
        roman = s["sentence"].split()
        deva = s["deva"].split() if s["deva"] is not None else [toy_transliterate(w) for w in roman]
        if len(deva) != len(roman):
            raise DataError(f"{len(roman)} roman words but {len(deva)} Devanagari words")
        # the label is never consulted; attributions explain the model's own prediction
        return ScriptPairExample(tuple(roman), tuple(deva), LABELS[0]), []
    if s["data"] is None or s["index"] is None:
        raise ConfigError("explain needs --sentence, or --data with --index")
    rows = load_dataset(s["data"], s["split"])
    if not 0 <= s["index"] < len(rows):
        raise ConfigError(f"--index {s['index']} outside the {len(rows)} {s['split']} examples")
    return rows[s["index"]], [Path(s["data"]) / f"{s['split']}.tsv"]


def cmd_explain(s: dict, out: Path):
    example, inputs = _explain_example(s)
    n = len(example.roman_text)
    if n > MAX_EXACT_WORDS and not s["sampled"]:
        raise ConfigError(f"{n} words: exact attribution handles at most {MAX_EXACT_WORDS}; rerun with --sampled")
    runs = [("proposed", _model_dir(s["model"]))]
    if s["compare_baseline"] is not None:
        runs.insert(0, ("baseline", _model_dir(s["compare_baseline"])))
    attrs = {}
    for name, mdir in runs:
        model, cfg, vocabs = load_model(mdir)
        attrs[name] = explain(example, model, s["class_index"], vocabs, cfg.max_len, s["sampled"],
                              s["permutations"], s["seed"])
        inputs.append(mdir / "model.ckpt")
    payload = {k: a.to_dict() for k, a in attrs.items()} if len(attrs) > 1 else attrs["proposed"].to_dict()
    _write_json(out / "attribution.json", payload)
    ansi = "\n".join(f"{k:>8}: {render_text_plot(a, 'ansi')}" for k, a in attrs.items())
    if s["format"] == "html":
        blocks = [(f"{k} (class {LABELS[a.explained_class]}, p={a.full_value:.4f})", render_text_plot(a, "html"))
                  for k, a in attrs.items()]
        (out / "attribution.html").write_text(html_document(blocks), encoding="utf-8")
    else:
        (out / "attribution.ansi").write_text(ansi + "\n", encoding="utf-8")
    print(ansi)
    return inputs, {k: {"class": a.explained_class, "values": a.values} for k, a in attrs.items()}


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid,
            "explain": cmd_explain}


def run_command(command: str, settings: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(settings.get("seed", 0) % 2**32)
    inputs, report = COMMANDS[command](settings, out)
    return write_manifest(out, command, settings, inputs, report)


def replay(manifest_path: Path, out: Path | None, check: bool) -> int:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("command") not in COMMANDS:
        raise ConfigError(f"{manifest_path} is not a scriptfuse manifest")
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists() or sha256(Path(path)) != digest:
            raise DataError(f"input {path} is missing or changed since the manifest was written")
    out = Path(manifest_path).parent if out is None else out
    again = run_command(manifest["command"], manifest["config"], out)
    if check:
        bad = sorted(k for k in set(manifest["artifacts"]) | set(again["artifacts"])
                     if manifest["artifacts"].get(k) != again["artifacts"].get(k))
        if bad:
            print("outputs differ from the manifest: " + ", ".join(bad), file=sys.stderr)
            return 3
        print(f"all {len(again['artifacts'])} outputs match the manifest")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "replay":
            return replay(args.manifest, args.out, args.check)
        settings = resolve_settings(args.command, args)
        run_command(args.command, settings, args.out)
        return 0
    except ScriptFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
