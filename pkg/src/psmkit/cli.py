"""Command-line entry point: ``psmkit <subcommand> [options]``."""

from __future__ import annotations

import argparse
import configparser
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .chem import ChemistryError, ModTable, default_mod_table, load_modification_table
from .index import IndexFormatError, index_proteins, load_index, save_index
from .model import flush_denormals
from .msio import ParseError, preprocess, read_fasta, read_mgf, read_table, write_fasta, write_report

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class DataError(Exception):
    """Bad or missing input data; maps to exit code 2."""


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# option registry with config-file fallback


@dataclass
class Opt:
    flag: str
    default: Any = None
    type: Optional[Callable] = None
    help: str = ""
    kind: str = "value"  # value | flag | path
    choices: Optional[Sequence] = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


COMMON = [
    Opt("--config", None, str, "INI file; section named after the subcommand (flags win)"),
    Opt("--seed", None, int, "random seed (falls back to PUF_SEED, then 0)"),
    Opt("--workers", 1, int, "worker count (processing is sequential; recorded in the manifest)"),
]

SYNTH_OPTS = [
    Opt("--out", None, str, "output directory"),
    Opt("--n-spectra", 2000, int, "number of spectra"),
    Opt("--n-proteins", 300, int, "random proteins when --fasta is not given"),
    Opt("--fasta", None, str, "source proteins", kind="path"),
    Opt("--exclude-truth", None, str, "truth TSV whose peptides must not be reused", kind="path"),
    Opt("--mods", None, str, "modification table TSV (default: bundled)", kind="path"),
    Opt("--mod-names", "Oxidation,Phospho,Acetyl,Crotonyl,Methyl,Nitro", _str_list, "modification names to inject"),
    Opt("--mod-fraction", 0.2, float, "fraction of modified peptides"),
    Opt("--single-ptm", None, str, "inject only this modification"),
    Opt("--single-ptm-fraction", 0.3, float, "fraction carrying the single PTM"),
    Opt("--noise-peaks", 0, int, "uniform noise peaks per spectrum"),
    Opt("--missing-rate", 0.0, float, "fraction of fragment peaks dropped"),
    Opt("--jitter-ppm", 0.0, float, "Gaussian m/z jitter (ppm)"),
    Opt("--instrument-shift", 0.0, float, "intensity/calibration shift in [0, 1]"),
    Opt("--pure-noise", False, _bool, "spectra unrelated to any peptide", kind="flag"),
    Opt("--prefix", "synth", str, "title prefix and file stem"),
]

INDEX_OPTS = [
    Opt("--fasta", None, str, "protein FASTA", kind="path"),
    Opt("--mods", None, str, "modification table TSV (default: bundled)", kind="path"),
    Opt("--var-mods", None, _str_list, "active modification names: variable mods, open-search deltas and model vocabulary (default: every table entry)"),
    Opt("--max-var-mods", 1, int, "variable modifications per peptide"),
    Opt("--mode", "restricted", str, "restricted expands variable mods; open indexes unmodified peptides", choices=("restricted", "open")),
    Opt("--enzyme", "trypsin", str, "digestion enzyme", choices=("trypsin", "nonspecific")),
    Opt("--missed", 1, int, "missed cleavages"),
    Opt("--min-length", 7, int, "minimum peptide length"),
    Opt("--max-length", 30, int, "maximum peptide length"),
    Opt("--decoy", "tryptic_reverse", str, "decoy generation mode"),
]

SEARCH_OPTS = [
    Opt("--mgf", None, str, "spectra", kind="path"),
    Opt("--index", None, str, "prebuilt index (skips digestion)", kind="path"),
    Opt("--model", None, str, "model file; omitted means kernel-only search", kind="path"),
    Opt("--fdr", 0.01, float, "FDR target"),
    Opt("--q-gate", 0.1, float, "kernel q-value gate for rescoring"),
    Opt("--top-k", None, int, "candidates per spectrum (default 10, 20 for nonspecific)"),
    Opt("--keep-failed-gate", False, _bool, "keep gated-out spectra for diagnostics", kind="flag"),
    Opt("--out", None, str, "output directory"),
] + INDEX_OPTS

TRAIN_OPTS = [
    Opt("--mgf", None, str, "training spectra", kind="path"),
    Opt("--truth", None, str, "truth TSV; otherwise kernel rank-1 at 1%% FDR are positives", kind="path"),
    Opt("--epochs", 5, int, "passes over the training items"),
    Opt("--batch-size", 16, int, "items per step"),
    Opt("--lr", 1e-3, float, "learning rate (momentum 0.9)"),
    Opt("--d-model", 64, int, "model width"),
    Opt("--n-heads", 4, int, "attention heads"),
    Opt("--n-layers", 2, int, "spectrum encoder and decoder layers"),
    Opt("--l-max", 45, int, "maximum peptide length"),
    Opt("--loss-weights", None, str, "comma list name=weight"),
    Opt("--out", None, str, "output directory"),
] + INDEX_OPTS

FINETUNE_OPTS = [
    Opt("--mgf", None, str, "spectra from the new run", kind="path"),
    Opt("--model", None, str, "model to adapt", kind="path"),
    Opt("--epochs", 1, int, "passes over the training items"),
    Opt("--batch-size", 16, int, "items per step"),
    Opt("--lr", 1e-3, float, "learning rate"),
    Opt("--min-batches", 16, int, "refuse with fewer batches"),
    Opt("--holdout", 0.2, float, "held-out fraction for before/after counts"),
    Opt("--fdr", 0.01, float, "FDR target"),
    Opt("--q-gate", 0.1, float, "kernel q-value gate"),
    Opt("--out", None, str, "output directory"),
] + INDEX_OPTS

DENOVO_OPTS = [
    Opt("--mgf", None, str, "spectra", kind="path"),
    Opt("--model", None, str, "model file", kind="path"),
    Opt("--mods", None, str, "active modification table TSV (default: the model's)", kind="path"),
    Opt("--workflow", "regular", str, "regular or enriched", choices=("regular", "enriched")),
    Opt("--user-mods", "", _str_list, "extra modification names for the enriched re-search"),
    Opt("--beam", 8, int, "beam width"),
    Opt("--max-mods", 2, int, "modifications per decoded peptide"),
    Opt("--min-cosine", 0.7, float, "QC filter: minimum predicted-spectrum cosine"),
    Opt("--min-score", None, float, "QC filter: minimum neural score (default: shuffled-null 95th percentile)"),
    Opt("--full-coverage", False, _bool, "QC filter: require full fragment coverage", kind="flag"),
    Opt("--out", None, str, "output directory"),
]

EVAL_OPTS = [
    Opt("--pred", None, str, "prediction TSV (PSM or de novo report)", kind="path"),
    Opt("--truth", None, str, "truth TSV", kind="path"),
    Opt("--mods", None, str, "modification table TSV (default: bundled)", kind="path"),
    Opt("--strict-il", False, _bool, "distinguish I from L (default: isobaric I and L match)", kind="flag"),
    Opt("--out", None, str, "output directory"),
]

ENTRAP_OPTS = [
    Opt("--ids", None, str, "TSV with peptide and species (target_db/entrapment_db) columns", kind="path"),
    Opt("--ratio", 1.75, float, "entrapment/target database size ratio"),
    Opt("--fdr", 0.01, float, "FDR the identifications were filtered at"),
    Opt("--out", None, str, "optional output directory"),
]

SUBCOMMANDS = {
    "synth": (SYNTH_OPTS, "generate a synthetic benchmark (MGF, truth TSV, FASTA)"),
    "index": (INDEX_OPTS + [Opt("--out", None, str, "output directory")], "digest a FASTA and cache the precursor index"),
    "search": (SEARCH_OPTS, "kernel search, neural rescoring and target-decoy FDR"),
    "train": (TRAIN_OPTS, "train a model on annotated spectra"),
    "finetune": (FINETUNE_OPTS, "adapt a model to a new run"),
    "denovo": (DENOVO_OPTS, "length-aware de novo sequencing"),
    "eval": (EVAL_OPTS, "recall and modification accuracy against truth"),
    "entrap": (ENTRAP_OPTS, "entrapment ratio analysis"),
}

REQUIRED = {
    "synth": ("out",),
    "index": ("fasta", "out"),
    "search": ("mgf", "out"),
    "train": ("mgf", "fasta", "out"),
    "finetune": ("mgf", "model", "fasta", "out"),
    "denovo": ("mgf", "model", "out"),
    "eval": ("pred", "truth"),
    "entrap": ("ids",),
}


def build_parser() -> Parser:
    parser = Parser(prog="psmkit", description="Multimodal PSM scoring, open search and de novo sequencing.")
    parser.add_argument("--version", action="version", version=f"psmkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=Parser)
    for name, (opts, text) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        for o in COMMON + opts:
            shown = "" if o.default is None else f" [default: {o.default}]"
            if o.kind == "flag":
                p.add_argument(o.flag, dest=o.dest, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.dest, default=None, type=o.type if o.type is not _str_list else str,
                               choices=o.choices, help=o.help + shown)
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file section, then defaults."""
    opts = COMMON + SUBCOMMANDS[args.command][0]
    section: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        try:
            cp.read_string(path.read_text())
        except configparser.Error as err:
            raise DataError(f"{path}: {err}") from None
        section = dict(cp.defaults())
        if cp.has_section(args.command):
            section.update(dict(cp.items(args.command)))
    section = {k.replace("-", "_"): v for k, v in section.items()}
    known = {o.dest for o in opts}
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
    for o in opts:
        value = getattr(args, o.dest, None)
        if value is None and o.dest in section:
            raw = section[o.dest]
            try:
                value = _bool(raw) if o.kind == "flag" else (o.type(raw) if o.type else raw)
            except ValueError as err:
                raise UsageError(f"config key {o.dest}: {err}") from None
            if o.choices and value not in o.choices:
                raise UsageError(f"config key {o.dest}: {value!r} not in {list(o.choices)}")
        elif value is not None and o.type is _str_list:
            value = _str_list(value)
        if value is None:
            value = o.default
            if o.type is _str_list and isinstance(value, str):
                value = _str_list(value)
        setattr(args, o.dest, value)
    if args.seed is None:
        env = os.environ.get("PUF_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"PUF_SEED must be an integer, got {env!r}") from None
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    for o in opts:
        if o.kind == "path" and getattr(args, o.dest):
            p = Path(getattr(args, o.dest))
            if not p.is_file():
                raise DataError(f"input file not found: {p}")
    return args


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def write_manifest(out: Path, args: argparse.Namespace, started: float, extra: dict | None = None) -> None:
    opts = COMMON + SUBCOMMANDS[args.command][0]
    lines = [
        f"command\t{args.command}",
        f"psmkit_version\t{__version__}",
        f"python_version\t{platform.python_version()}",
        f"numpy_version\t{np.__version__}",
        f"torch_version\t{torch.__version__}",
        f"seed\t{args.seed}",
        f"wall_time_sec\t{time.time() - started:.3f}",
    ]
    for o in sorted(opts, key=lambda o: o.dest):
        v = getattr(args, o.dest)
        lines.append(f"config.{o.dest}\t{','.join(v) if isinstance(v, list) else v}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}\t{v}")
    (out / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mod_table(path: Optional[str]) -> ModTable:
    return load_modification_table(path) if path else default_mod_table()


def _active_table(args, table: ModTable) -> ModTable:
    """The ``--var-mods`` subset of ``table``; every entry when unset."""
    return table.subset(args.var_mods) if args.var_mods else table


def _write_kv(path: Path, values: dict) -> None:
    lines = ["key\tvalue"]
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        lines.append(f"{k}\t{v}")
    path.write_text("\n".join(lines) + "\n")


def _load_spectra(path: str) -> list:
    stats: dict = {}
    spectra = [preprocess(s) for s in read_mgf(path, stats)]
    titles = [s.title for s in spectra]
    if len(set(titles)) != len(titles):
        raise DataError(f"{path}: duplicate spectrum titles")
    return spectra


def _build_index(args, table: ModTable):
    if getattr(args, "index", None):
        return load_index(args.index)
    proteins = read_fasta(args.fasta)
    var = None if args.mode == "open" else _active_table(args, table)
    return index_proteins(
        proteins, args.enzyme, args.missed, (args.min_length, args.max_length),
        args.decoy or None, variable_mods=var, max_variable_mods=args.max_var_mods, mod_table=table,
    )


def _search_cfg(args):
    from .search import SearchConfig

    return SearchConfig(
        mode=args.mode, enzyme=args.enzyme, top_k=getattr(args, "top_k", None),
        q_gate=args.q_gate, fdr_target=args.fdr, keep_failed_gate=getattr(args, "keep_failed_gate", False),
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    from .synth import SynthConfig, make_synthetic, read_truth

    table = _mod_table(args.mods)
    proteins = read_fasta(args.fasta) if args.fasta else None
    exclude = set()
    if args.exclude_truth:
        exclude = {p.residues for p in read_truth(args.exclude_truth, table).values() if p is not None}
    for name in args.mod_names + ([args.single_ptm] if args.single_ptm else []):
        if name not in table.by_name:
            raise DataError(f"unknown modification {name!r}")
    cfg = SynthConfig(
        n_spectra=args.n_spectra, n_proteins=args.n_proteins, mods=tuple(args.mod_names),
        mod_fraction=args.mod_fraction, single_ptm=args.single_ptm,
        single_ptm_fraction=args.single_ptm_fraction, noise_peaks=args.noise_peaks,
        missing_rate=args.missing_rate, mz_jitter_ppm=args.jitter_ppm,
        instrument_shift=args.instrument_shift, pure_noise=args.pure_noise,
        title_prefix=args.prefix, seed=args.seed,
    )
    run = make_synthetic(cfg, proteins, exclude, table)
    paths = run.write(_out_dir(args), args.prefix)
    return {"spectra": len(run.spectra), **{f"file.{k}": v.name for k, v in paths.items()}}


def cmd_index(args) -> dict:
    table = _mod_table(args.mods)
    idx = _build_index(args, table)
    out = _out_dir(args)
    save_index(idx, out / "index.pufidx")
    return {"entries": len(idx)}


def cmd_search(args) -> dict:
    from .model import load_params
    from .search import accepted_targets, compute_qvalues, rescore_run, search_run

    if not args.index and not args.fasta:
        raise UsageError("search needs --fasta or --index")
    table = _mod_table(args.mods)
    active = _active_table(args, table)
    cfg = _search_cfg(args)
    model = load_params(args.model, active) if args.model else None
    spectra = _load_spectra(args.mgf)
    idx = _build_index(args, table)
    run = search_run(spectra, idx, active if cfg.mode == "open" else None, cfg)
    out = _out_dir(args)
    if model is None:
        rank1 = compute_qvalues([r[0] for r in run if r], "kernel_score")
        accepted = [r for r in rank1 if r.q_value <= cfg.fdr_target]
        summary = {
            "spectra": len(spectra),
            "searched_with_candidates": len(rank1),
            "kernel_accepted_targets": len(accepted_targets(rank1, cfg.fdr_target)),
            "accepted_targets": len(accepted_targets(rank1, cfg.fdr_target)),
        }
    else:
        res = rescore_run(run, {s.title: s for s in spectra}, model, cfg, active)
        accepted = res.accepted
        summary = res.summary()
        rank1 = res.rank1
    write_report(accepted, "psm", out / "psms.tsv")
    write_report(rank1, "psm", out / "rank1.tsv")
    _write_kv(out / "summary.tsv", summary)
    return summary


def _loss_weights(text: Optional[str]) -> Optional[dict]:
    if not text:
        return None
    out = {}
    for part in _str_list(text):
        name, _, value = part.partition("=")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"bad loss weight {part!r}") from None
    return out


def train_toy(args) -> dict:
    """Kernel-annotate the training run, train, then write the model and loss curve."""
    from .model import ModelConfig, PsmModel, save_params
    from .search import SearchConfig, compute_qvalues, run_epochs, search_run, training_items
    from .synth import read_truth

    table = _mod_table(args.mods)
    spectra = _load_spectra(args.mgf)
    by_title = {s.title: s for s in spectra}
    idx = _build_index(args, table)
    active = _active_table(args, table)
    run = search_run(spectra, idx, active if args.mode == "open" else None, SearchConfig(mode=args.mode, enzyme=args.enzyme))
    if args.truth:
        positives = {t: p for t, p in read_truth(args.truth, table).items() if p is not None}
    else:
        rank1 = compute_qvalues([r[0] for r in run if r], "kernel_score")
        positives = {r.spectrum_title: r.peptide for r in rank1 if not r.is_decoy and r.q_value <= 0.01}
    items = [it for it in training_items(run, by_title, positives) if len(it.positive) <= args.l_max]
    if not items:
        raise DataError("no training items: no spectrum has a positive peptide")
    config = ModelConfig(
        d_model=args.d_model, n_heads=args.n_heads, n_spectrum_layers=args.n_layers,
        n_decoder_layers=args.n_layers, l_max=args.l_max, seed=args.seed, mod_table_tsv=active.to_tsv(),
    )
    model = PsmModel(config)
    history = run_epochs(model, items, args.epochs, args.batch_size, args.lr, args.seed, _loss_weights(args.loss_weights))
    out = _out_dir(args)
    from .model.train import LOSS_NAMES

    cols = ["step", "epoch", "batch", "total", *LOSS_NAMES]
    rows = ["\t".join(cols)]
    for step, h in enumerate(history):
        vals = [str(step), str(h["epoch"]), str(h["batch"])] + [f"{h.get(c, float('nan')):.6f}" for c in cols[3:]]
        rows.append("\t".join(vals))
    (out / "loss_curve.tsv").write_text("\n".join(rows) + "\n")
    save_params(model, out / "model.pufmdl")
    summary = {
        "items": len(items),
        "steps": len(history),
        "initial_total_loss": history[0]["total"],
        "final_total_loss": history[-1]["total"],
    }
    _write_kv(out / "train_summary.tsv", summary)
    return summary


def cmd_finetune(args) -> dict:
    from .model import load_params, save_params
    from .search import finetune, search_run

    table = _mod_table(args.mods)
    active = _active_table(args, table)
    model = load_params(args.model, active)
    spectra = _load_spectra(args.mgf)
    idx = _build_index(args, table)
    cfg = _search_cfg(args)
    run = search_run(spectra, idx, active if cfg.mode == "open" else None, cfg)
    res = finetune(
        model, run, {s.title: s for s in spectra}, cfg, args.epochs, args.batch_size, args.lr,
        args.min_batches, args.holdout, args.seed, active,
    )
    out = _out_dir(args)
    save_params(res.model, out / "model.pufmdl")
    summary = {"batches": res.n_batches, "accepted_before": res.before, "accepted_after": res.after}
    _write_kv(out / "finetune_summary.tsv", summary)
    return summary


def cmd_denovo(args) -> dict:
    from .denovo import (
        DenovoConfig,
        FilterConfig,
        denovo_pools,
        enriched_denovo,
        qc_filter,
        regular_denovo,
        shuffled_null_threshold,
    )
    from .model import combo_vocab, load_params

    table = _mod_table(args.mods) if args.mods else None
    model = load_params(args.model, table)
    table = table if table is not None else model.config.mod_table
    spectra = _load_spectra(args.mgf)
    cfg = DenovoConfig(beam=args.beam, max_mods=args.max_mods)
    pools = denovo_pools(spectra, model, cfg, combo_vocab(model, table))
    out = _out_dir(args)
    summary: dict = {"spectra": len(spectra)}
    if args.workflow == "enriched":
        res = enriched_denovo(spectra, model, args.user_mods, cfg, pools, table)
        records = res.records
        write_fasta(res.fasta, out / "compiled_candidates.fasta")
        lines = ["modification\tcandidates"] + [f"{n}\t{c}" for n, c in res.mod_ranking]
        (out / "mod_ranking.tsv").write_text("\n".join(lines) + "\n")
        summary["variable_mods"] = ",".join(res.variable_mods)
        summary["fasta_entries"] = len(res.fasta)
    else:
        records = regular_denovo(spectra, model, cfg, pools)
    by_title = {s.title: s for s in spectra}
    threshold = args.min_score
    if threshold is None:
        threshold = shuffled_null_threshold(by_title, records, model, 0.95, args.seed)
    kept, hc = qc_filter(records, FilterConfig(threshold, args.min_cosine, args.full_coverage))
    write_report(records, "denovo", out / "denovo.tsv")
    write_report(kept, "denovo", out / "denovo_filtered.tsv")
    summary.update(records=len(records), min_neural_score=float(threshold), min_cosine=args.min_cosine,
                   kept=len(kept), high_confidence=len(hc))
    _write_kv(out / "filter_summary.tsv", summary)
    return summary


def _read_predictions(path: str, table: ModTable) -> dict:
    from .chem import parse_mod_string

    out = {}
    for row in read_table(path):
        if row.get("peptide") in (None, "", "NA"):
            continue
        mods = row.get("modifications") or ""
        out[row["title"]] = parse_mod_string(row["peptide"], "" if mods == "NA" else mods, table)
    return out


def cmd_eval(args) -> dict:
    from .metrics import evaluate, format_metrics, write_summary_svg
    from .synth import read_truth

    table = _mod_table(args.mods)
    try:
        pred = _read_predictions(args.pred, table)
        truth = read_truth(args.truth, table)
    except KeyError as err:
        raise DataError(f"missing column {err} in input table") from None
    metrics = evaluate(pred, truth, not args.strict_il)
    rows = read_table(args.pred)
    with open(args.pred) as fh:
        header = fh.readline().rstrip("\n").split("\t")
    if "predicted_length" in header:
        lengths = {r["title"]: int(r["predicted_length"]) for r in rows}
        scored = [t for t, p in truth.items() if p is not None]
        within = sum(1 for t in scored if t in lengths and abs(lengths[t] - len(truth[t])) <= 2)
        metrics["length_within_2"] = within / len(scored) if scored else None
    text = format_metrics(metrics)
    if args.out:
        out = _out_dir(args)
        (out / "metrics.tsv").write_text(text)
        fractions = {k: v for k, v in metrics.items() if not k.startswith("n_")}
        write_summary_svg(fractions, out / "summary.svg", "evaluation")
    sys.stdout.write(text)
    return {k: v for k, v in metrics.items()}


def cmd_entrap(args) -> dict:
    from .metrics import entrapment_analysis, entrapment_report

    rows = read_table(args.ids)
    try:
        ids = [(r["peptide"], r["species"]) for r in rows]
    except KeyError as err:
        raise DataError(f"{args.ids}: missing column {err}") from None
    try:
        observed, expected = entrapment_analysis(ids, args.ratio, args.fdr)
    except ValueError as err:
        raise DataError(str(err)) from None
    text = entrapment_report(observed, expected, args.fdr, args.ratio)
    if args.out:
        (_out_dir(args) / "entrapment.tsv").write_text(text)
    sys.stdout.write(text)
    return {"observed": observed, "expected": expected}


HANDLERS = {
    "synth": cmd_synth, "index": cmd_index, "search": cmd_search, "train": train_toy,
    "finetune": cmd_finetune, "denovo": cmd_denovo, "eval": cmd_eval, "entrap": cmd_entrap,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        args = resolve(args)
        seed_everything(args.seed)
        with flush_denormals():
            extra = HANDLERS[args.command](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"psmkit: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, ChemistryError, IndexFormatError, OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as err:
        print(f"psmkit: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    if getattr(args, "out", None):
        write_manifest(Path(args.out), args, started, {f"result.{k}": v for k, v in (extra or {}).items()})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
