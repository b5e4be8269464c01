"""``circformer`` command line: dataset preparation, training, prediction and analysis.

Settings resolve as command-line flag, then config file, then built-in
default.  Config files use ``key = value`` lines grouped in sections; a
``[common]`` section applies to every subcommand and a section named after
the subcommand (``[train]``, ``[predict]``...) to that one only.  Keys are
the long flag names without the leading dashes.

Every run writes ``run_manifest.json`` to its output directory with the
effective settings, seed, package versions and timings.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from . import datasets as D
from . import genome_io as G
from . import inference as I
from . import interpret as X
from . import metrics as Mt
from . import training as Tr
from .model import CircFormerMoE, ModelConfig, RoutingError, predict_proba

log = logging.getLogger("circformer")

SUBCOMMANDS = ("prepare-ssd", "prepare-ssp", "train", "finetune", "eval", "predict", "call",
               "saliency", "logo", "scan-polyat", "selftest")
MANIFEST_NAME = "run_manifest.json"
REFERENCE_POLYAT_BASELINE = 0.174


class CliError(Exception):
    """Validation failure reported with exit status 1."""


class UsageError(Exception):
    """Bad command line reported with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# ---------------------------------------------------------------- options

def _int_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    multiple: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


COMMON = [
    Opt("config", str, None, "config file (key = value, sectioned)"),
    Opt("out", str, None, "output directory"),
    Opt("seed", int, 0, "seed for every randomized step"),
    Opt("workers", int, 1, "parallelism bound (1 = bit-reproducible)"),
    Opt("log-level", str, "WARNING", "logging level"),
]
GENOME = [
    Opt("genome", str, None, "FASTA path, or SPECIES=PATH (repeatable)", multiple=True),
    Opt("ann", str, None, "circRNA annotation TSV"),
    Opt("species", _str_list, None, "comma-separated species subset"),
]
MODEL = [
    Opt("embed-dim", int, 64), Opt("conv-blocks", int, 4), Opt("kernel-size", int, 9),
    Opt("dilations", _int_tuple, (1, 2, 4, 8)), Opt("attn-blocks", int, 2), Opt("heads", int, 4),
    Opt("random-features", int, 64), Opt("ffn-mult", int, 2), Opt("activation", str, "relu"),
    Opt("attention", str, "favor", "favor or exact"),
    Opt("positional-encoding", _bool, True), Opt("moe", _bool, True, "per-species heads"),
]
TRAIN = [
    Opt("data", str, None, "dataset directory from prepare-ssd/prepare-ssp"),
    Opt("epochs", int, 10), Opt("batch-size", int, None, "default: 2 per species"),
    Opt("lr", float, 1e-3), Opt("pos-weight", float, None, "default: manifest N/P (SSD) or 10 (SSP)"),
    Opt("pos-weight-epochs", int, None), Opt("clip-norm", float, 5.0),
    Opt("batches-per-epoch", int, None),
]
INFER = [
    Opt("checkpoint", str, None, "model checkpoint"),
    Opt("window", int, 5001), Opt("stride", int, None), Opt("batch", int, 8, "inference batch size"),
]
SPECS: dict[str, list[Opt]] = {
    "prepare-ssd": GENOME + [Opt("window", int, 5001), Opt("neg-per-window", float, 0.5)],
    "prepare-ssp": GENOME + [Opt("context", int, 1001), Opt("neg-ratio", float, 10.0)],
    "train": MODEL + TRAIN + [Opt("init", str, None, "start from this checkpoint")],
    "finetune": TRAIN + [Opt("checkpoint", str, None, "pretrained checkpoint"),
                         Opt("species", _str_list, None, "species to fine-tune")],
    "eval": [Opt("task", str, "ssd"), Opt("checkpoint", str, None), Opt("data", str, None),
             Opt("track", str, None, "track TSV from predict (SSD, instead of a checkpoint)"),
             Opt("ann", str, None, "annotations giving the true sites for --track"),
             Opt("species", str, None), Opt("threshold", float, 0.5), Opt("batch", int, 8)],
    "predict": GENOME[:1] + INFER + [Opt("species", str, None), Opt("format", str, "tsv", "tsv or binary")],
    "call": GENOME[:1] + INFER + [
        Opt("species", str, None), Opt("ssp-checkpoint", str, None),
        Opt("peak-threshold", float, 0.5), Opt("min-separation", int, 1),
        Opt("max-span", int, 100_000), Opt("context", int, 1001), Opt("pair-threshold", float, 0.5)],
    "saliency": GENOME + [Opt("checkpoint", str, None), Opt("radius", int, 2500),
                          Opt("max-sites", int, None), Opt("target", int, None)],
    "logo": [Opt("saliency-dir", str, None, "output directory of a saliency run"),
             Opt("radius", int, 50)],
    "scan-polyat": GENOME + [Opt("window", int, 100), Opt("min-run", int, 5),
                             Opt("convention", str, "inclusive", "inclusive or half-open"),
                             Opt("trials", int, 100_000)],
    "selftest": [],
}


def _merge_specs(sub: str) -> list[Opt]:
    seen, out = set(), []
    for o in COMMON + SPECS[sub]:
        if o.name not in seen:
            seen.add(o.name)
            out.append(o)
    return out


SUMMARIES = {
    "prepare-ssd": "build splice-site detection windows from genomes and annotations",
    "prepare-ssp": "build splice-site pairing samples (split pair sequences)",
    "train": "pretrain a model on an SSD dataset",
    "finetune": "fine-tune a checkpoint for one species (SSD or SSP)",
    "eval": "score a checkpoint on a dataset, or a track against annotations",
    "predict": "sliding-window per-base splice-site probabilities",
    "call": "detect sites, pair them and report circRNA calls",
    "saliency": "gradient saliency profiles around annotated sites",
    "logo": "saliency-weighted sequence logos from saliency profiles",
    "scan-polyat": "polyA/T frequency near sites vs. a random baseline",
    "selftest": "run the built-in gradient, attention and metric checks",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="circformer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"circformer {__version__}")
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    for sub in SUBCOMMANDS:
        p = subs.add_parser(sub, help=SUMMARIES[sub], description=SUMMARIES[sub])
        for o in _merge_specs(sub):
            kind = str if o.type in (_int_tuple, _str_list, _bool) else o.type
            p.add_argument(f"--{o.name}", dest=o.dest, type=kind, default=None,
                           action="append" if o.multiple else "store",
                           help=f"{o.help} (default: {o.default})".strip())
    return parser


def _read_config(path: str, sub: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        cp.read_string(text if text.lstrip().startswith("[") else "[common]\n" + text)
    except configparser.Error as exc:
        raise CliError(f"{path}: {exc}") from exc
    known = {o.name for o in _merge_specs(sub)} | {o.dest for o in _merge_specs(sub)}
    values: dict[str, str] = {}
    if cp.has_section("common"):
        # shared keys that this subcommand does not take are ignored
        values.update((k, v) for k, v in cp.items("common") if k in known)
    if cp.has_section(sub):
        unknown = sorted(k for k, _ in cp.items(sub) if k not in known)
        if unknown:
            raise CliError(f"{path}: unknown keys in [{sub}]: {unknown}")
        values.update(cp.items(sub))
    return values


def resolve_settings(sub: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Flags override config file values, which override defaults."""
    opts = _merge_specs(sub)
    config_vals = _read_config(ns.config, sub) if ns.config else {}
    settings: dict[str, Any] = {}
    for o in opts:
        value = getattr(ns, o.dest)
        if value is None:
            raw = config_vals.get(o.name, config_vals.get(o.dest))
            if raw is not None:
                value = [v.strip() for v in raw.split("\n") if v.strip()] if o.multiple else raw
        if value is None:
            settings[o.dest] = o.default
            continue
        try:
            settings[o.dest] = [str(v) for v in value] if o.multiple else o.type(value)
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid value for {o.name}: {value!r} ({exc})") from exc
    return settings


# ---------------------------------------------------------------- helpers

def _require(s: dict, *names: str) -> None:
    missing = [n for n in names if s.get(n.replace("-", "_")) in (None, [])]
    if missing:
        raise CliError("missing required setting(s): " + ", ".join(f"--{n}" for n in missing))


def _existing(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_genomes(specs: Sequence[str], species: Sequence[str]) -> dict[str, dict[str, G.GenomeRecord]]:
    """Map species to genomes from ``PATH`` or ``SPECIES=PATH`` entries."""
    out: dict[str, dict[str, G.GenomeRecord]] = {}
    shared = None
    for spec in specs:
        sp, sep, path = spec.partition("=")
        if not sep:
            sp, path = None, spec
        idx = G.genome_index(G.read_fasta(_existing(path, "genome FASTA")))
        if sp is None:
            shared = idx
        else:
            out[sp] = idx
    for sp in species:
        if sp not in out:
            if shared is None:
                raise CliError(f"no genome given for species {sp!r}")
            out[sp] = shared
    return out


def _annotations(s: dict) -> list[G.CircRnaAnnotation]:
    anns = G.read_annotations(_existing(s["ann"], "annotation file"))
    if s.get("species"):
        wanted = set(s["species"]) if isinstance(s["species"], list) else {s["species"]}
        anns = [a for a in anns if a.species in wanted]
    if not anns:
        raise CliError("no annotations left after species filtering")
    return anns


def _check_annotation_ranges(anns, genomes) -> None:
    problems = []
    for i, a in enumerate(anns):
        rec = genomes[a.species].get(a.chrom)
        if rec is None:
            problems.append((i + 1, f"unknown chromosome {a.chrom!r} for species {a.species}"))
        elif a.site_b >= len(rec):
            problems.append((i + 1, f"position out of range ({a.site_b} ≥ length {len(rec)})"))
    if problems:
        raise G.AnnotationError(problems)


def _sorted_species(anns) -> list[str]:
    return sorted({a.species for a in anns})


def _model_config(s: dict, species: Sequence[str]) -> ModelConfig:
    return ModelConfig(species=tuple(species), embed_dim=s["embed_dim"], conv_blocks=s["conv_blocks"],
                       kernel_size=s["kernel_size"], dilations=s["dilations"],
                       attn_blocks=s["attn_blocks"], heads=s["heads"],
                       random_features=s["random_features"], ffn_mult=s["ffn_mult"],
                       activation=s["activation"], attention=s["attention"],
                       positional_encoding=s["positional_encoding"], moe=s["moe"], seed=s["seed"])


def _train_config(s: dict, task: str, species: Sequence[str], manifest) -> Tr.TrainConfig:
    pos_weight = s["pos_weight"]
    if pos_weight is None and task == "ssd":
        pos_weight = Tr.pos_weight_from_manifest(manifest)
    batch = s["batch_size"] or 2 * len(species)
    return Tr.TrainConfig(task=task, epochs=s["epochs"], batch_size=batch, lr=s["lr"],
                          pos_weight=pos_weight, pos_weight_epochs=s["pos_weight_epochs"],
                          seed=s["seed"], species=tuple(species), clip_norm=s["clip_norm"],
                          batches_per_epoch=s["batches_per_epoch"])


def _load_dataset(path: str):
    _existing(os.path.join(path, "manifest.txt"), "dataset manifest")
    samples, manifest = D.read_dataset(path)
    if not samples:
        raise CliError(f"dataset {path} is empty")
    return samples, manifest


def _write_log(path: str, history: Sequence[Tr.EpochStats]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for st in history:
            fh.write(st.log_line() + "\n")


def _checkpoint(path: str, species=None) -> CircFormerMoE:
    return Tr.load_checkpoint(_existing(path, "checkpoint"), species)


# ---------------------------------------------------------------- subcommands

def cmd_prepare(s: dict, task: str) -> dict:
    _require(s, "genome", "ann", "out")
    anns = _annotations(s)
    species = _sorted_species(anns)
    genomes = _load_genomes(s["genome"], species)
    _check_annotation_ranges(anns, genomes)
    if task == "ssd":
        samples, man = D.build_ssd_dataset(genomes, anns, s["window"], s["neg_per_window"],
                                           s["seed"], species)
    else:
        samples, man = D.build_ssp_dataset(genomes, anns, s["context"], s["neg_ratio"],
                                           s["seed"], species)
    path = D.write_dataset(s["out"], samples, man)
    return {"outputs": [path, os.path.join(s["out"], "manifest.txt")], "samples": len(samples)}


def _task_of(manifest) -> str:
    return manifest.task.lower()


def cmd_train(s: dict) -> dict:
    _require(s, "data", "out")
    samples, man = _load_dataset(s["data"])
    task = _task_of(man)
    species = s.get("species") or sorted(man.species_counts) or sorted({x.species for x in samples})
    if s.get("init"):
        model = _checkpoint(s["init"], species)
        if task == "ssp":
            model = Tr.build_ssp_model(model)
    else:
        model = CircFormerMoE(_model_config(s, species))
    tc = _train_config(s, task, species, man)
    history = Tr.fit(model, samples, tc)
    os.makedirs(s["out"], exist_ok=True)
    ckpt = os.path.join(s["out"], "model.cfme")
    Tr.save_checkpoint(model, ckpt, {"epoch": tc.epochs, "task": task,
                                     "steps": sum(h.steps for h in history)}, {"seed": s["seed"]})
    log_path = os.path.join(s["out"], "train_log.txt")
    _write_log(log_path, history)
    return {"outputs": [ckpt, log_path], "final_loss": history[-1].loss if history else None}


def cmd_finetune(s: dict) -> dict:
    _require(s, "data", "out", "checkpoint", "species")
    samples, man = _load_dataset(s["data"])
    task = _task_of(man)
    base = _checkpoint(s["checkpoint"], s["species"])
    outputs = []
    os.makedirs(s["out"], exist_ok=True)
    for sp in s["species"]:
        model = Tr.build_ssp_model(base) if task == "ssp" else base.copy()
        tc = _train_config(s, task, [sp], man)
        history = Tr.fit(model, samples, tc)
        ckpt = os.path.join(s["out"], f"{task}_{sp}.cfme")
        Tr.save_checkpoint(model, ckpt, {"epoch": tc.epochs, "task": task, "species": sp},
                           {"seed": s["seed"]})
        log_path = os.path.join(s["out"], f"{task}_{sp}_log.txt")
        _write_log(log_path, history)
        outputs += [ckpt, log_path]
    return {"outputs": outputs}


def _dataset_predictions(model, samples, task, batch):
    scores, labels = [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x, y, sp = Tr.encode_batch(chunk, task, model.dtype)
        scores.append(predict_proba(Tr.forward_task(model, x, sp, task)))
        labels.append(y)
    return scores, labels


def cmd_eval(s: dict) -> dict:
    _require(s, "out")
    task = s["task"].lower()
    if task not in ("ssd", "ssp"):
        raise CliError(f"unknown task {s['task']!r}")
    rows = []
    meta = {"seed": s["seed"], "task": task, "threshold": s["threshold"], "scale": "fractions in [0, 1]"}
    if task == "ssp":
        meta["balanced_accuracy"] = "0.5 * (TP / (TP + FN) + TN / (TN + FP))"
    else:
        meta["top_k_accuracy"] = "hits among the k highest peaks / k, k = number of true sites"
    if s.get("track"):
        if task != "ssd":
            raise CliError("--track evaluation is for the SSD task")
        _require(s, "ann")
        tracks = I.read_track_tsv(_existing(s["track"], "track"))
        anns = G.read_annotations(_existing(s["ann"], "annotation file"))
        if s.get("species"):
            anns = [a for a in anns if a.species == s["species"]]
        sites: dict[str, set[int]] = {}
        for site in G.splice_sites(anns):
            sites.setdefault(site.chrom, set()).add(site.pos)
        probs = np.concatenate([tracks[c] for c in sorted(tracks)])
        truth, off = [], 0
        for c in sorted(tracks):
            truth += [off + p for p in sorted(sites.get(c, ())) if p < len(tracks[c])]
            off += len(tracks[c])
        res = Mt.ssd_metrics(probs, truth, s["threshold"])
        rows += [(s.get("species") or "all", "ssd", k, v) for k, v in res.items()]
        meta["track"] = s["track"]
    else:
        _require(s, "checkpoint", "data")
        samples, man = _load_dataset(s["data"])
        if _task_of(man) != task:
            raise CliError(f"dataset task {man.task} does not match --task {task}")
        model = _checkpoint(s["checkpoint"])
        by_sp = D.group_by_species(samples)
        for sp in sorted(by_sp):
            if sp not in model.config.species:
                raise CliError(f"checkpoint has no head for species {sp!r}")
            scores, labels = _dataset_predictions(model, by_sp[sp], task, s["batch"])
            if task == "ssd":
                probs = np.concatenate([p.reshape(-1) for p in scores])
                y = np.concatenate([t.reshape(-1) for t in labels])
                res = Mt.ssd_metrics(probs, np.flatnonzero(y).tolist(), s["threshold"])
            else:
                res = Mt.ssp_metrics(np.concatenate(scores), np.concatenate(labels), s["threshold"])
            rows += [(sp, task, k, v) for k, v in res.items()]
        meta.update({"checkpoint": s["checkpoint"], "data": s["data"]})
    os.makedirs(s["out"], exist_ok=True)
    path = os.path.join(s["out"], "report.tsv")
    Mt.write_report(path, rows, meta)
    return {"outputs": [path]}


def _single_genome(s: dict) -> dict[str, G.GenomeRecord]:
    _require(s, "genome")
    if len(s["genome"]) != 1:
        raise CliError("give exactly one --genome for this subcommand")
    path = s["genome"][0].partition("=")[2] or s["genome"][0]
    return G.genome_index(G.read_fasta(_existing(path, "genome FASTA")))


def cmd_predict(s: dict) -> dict:
    _require(s, "checkpoint", "species", "out")
    if s["format"] not in ("tsv", "binary"):
        raise CliError("--format must be tsv or binary")
    genome = _single_genome(s)
    model = _checkpoint(s["checkpoint"], [s["species"]])
    tracks = [I.sliding_window_predict(model, genome[c], s["species"], s["window"], s["stride"],
                                       s["batch"]) for c in sorted(genome)]
    for t in tracks:
        t.meta["seed"] = s["seed"]
    os.makedirs(s["out"], exist_ok=True)
    if s["format"] == "tsv":
        path = os.path.join(s["out"], "track.tsv")
        I.write_track_tsv(path, tracks)
        outputs = [path]
    else:
        outputs = []
        for t in tracks:
            path = os.path.join(s["out"], f"{t.chrom}.cftk")
            I.write_track_binary(path, t)
            outputs.append(path)
    return {"outputs": outputs}


def cmd_call(s: dict) -> dict:
    _require(s, "checkpoint", "species", "out")
    genome = _single_genome(s)
    model = _checkpoint(s["checkpoint"], [s["species"]])
    ssp_model = _checkpoint(s["ssp_checkpoint"], [s["species"]]) if s["ssp_checkpoint"] else None
    cfg = I.CallConfig(window=s["window"], stride=s["stride"], peak_threshold=s["peak_threshold"],
                       min_separation=s["min_separation"], max_span=s["max_span"],
                       context=s["context"], pair_threshold=s["pair_threshold"], batch_size=s["batch"])
    calls = I.call_circrnas(model, genome, s["species"], cfg, ssp_model)
    os.makedirs(s["out"], exist_ok=True)
    path = os.path.join(s["out"], "calls.tsv")
    I.write_calls(path, calls)
    return {"outputs": [path], "calls": len(calls)}


def cmd_saliency(s: dict) -> dict:
    _require(s, "checkpoint", "genome", "ann", "out")
    anns = _annotations(s)
    species = _sorted_species(anns)
    genomes = _load_genomes(s["genome"], species)
    _check_annotation_ranges(anns, genomes)
    model = _checkpoint(s["checkpoint"], species)
    r = s["radius"]
    os.makedirs(s["out"], exist_ok=True)
    outputs = []
    for sp in species:
        sites = [x for x in G.splice_sites(anns) if x.species == sp]
        if s["max_sites"]:
            sites = sites[:s["max_sites"]]
        windows = [G.padded_slice(genomes[sp][x.chrom].sequence, x.pos - r, x.pos + r + 1) for x in sites]
        maps = [X.saliency_map(model, D.one_hot_encode(w), sp, s["target"]) for w in windows]
        prof = X.SaliencyProfile(X.average_saliency(maps), sp, len(maps), {"radius": r, "seed": s["seed"]})
        path = os.path.join(s["out"], f"saliency_{sp}.tsv")
        prof.write_tsv(path)
        seq_path = os.path.join(s["out"], f"windows_{sp}.txt")
        with open(seq_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(w + "\n" for w in windows)
        map_path = os.path.join(s["out"], f"maps_{sp}.npy")
        np.save(map_path, np.stack(maps))
        outputs += [path, seq_path, map_path]
    return {"outputs": outputs}


def cmd_logo(s: dict) -> dict:
    _require(s, "saliency_dir")
    src = _existing(s["saliency_dir"], "saliency directory")
    out = s["out"] or src
    os.makedirs(out, exist_ok=True)
    outputs = []
    species = sorted(f[len("windows_"):-4] for f in os.listdir(src)
                     if f.startswith("windows_") and f.endswith(".txt"))
    if not species:
        raise CliError(f"no saliency outputs in {src}")
    for sp in species:
        with open(os.path.join(src, f"windows_{sp}.txt"), encoding="utf-8") as fh:
            windows = [line.strip() for line in fh if line.strip()]
        maps = np.load(_existing(os.path.join(src, f"maps_{sp}.npy"), "saliency maps"))
        logo = X.saliency_logo(windows, list(maps), s["radius"])
        tsv, svg = os.path.join(out, f"logo_{sp}.tsv"), os.path.join(out, f"logo_{sp}.svg")
        logo.write_tsv(tsv)
        with open(svg, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(logo.to_svg())
        outputs += [tsv, svg]
    return {"outputs": outputs}


def cmd_scan_polyat(s: dict) -> dict:
    _require(s, "genome", "ann", "out")
    if s["convention"] not in X.WINDOW_CONVENTIONS:
        raise CliError(f"--convention must be one of {X.WINDOW_CONVENTIONS}")
    anns = _annotations(s)
    species = _sorted_species(anns)
    genomes = _load_genomes(s["genome"], species)
    _check_annotation_ranges(anns, genomes)
    n_bases = X.window_length(s["window"], s["convention"])
    exact = X.exact_polyat_probability(n_bases, s["min_run"])
    mc = X.polyat_random_baseline(n_bases, s["min_run"], s["trials"], s["seed"])
    rows = []
    for sp in species:
        sites = [(x.chrom, x.pos) for x in G.splice_sites(anns) if x.species == sp]
        hits, total = X.polyat_enrichment(genomes[sp], sites, s["window"], s["min_run"], s["convention"])
        rows.append((sp, "polyat", "observed_fraction", hits / total))
        rows.append((sp, "polyat", "sites", float(total)))
    rows += [("random", "polyat", "exact_dp", exact), ("random", "polyat", "monte_carlo", mc),
             ("random", "polyat", "monte_carlo_half_width", X.binomial_half_width(mc, s["trials"])),
             ("random", "polyat", "reference_baseline", REFERENCE_POLYAT_BASELINE)]
    os.makedirs(s["out"], exist_ok=True)
    path = os.path.join(s["out"], "polyat.tsv")
    Mt.write_report(path, rows, {"window": s["window"], "window_bases": n_bases,
                                 "convention": s["convention"], "min_run": s["min_run"],
                                 "trials": s["trials"], "seed": s["seed"]})
    return {"outputs": [path]}


def cmd_selftest(s: dict) -> dict:
    from . import selftest
    results = selftest.run_all(s["seed"])
    for r in results:
        print(r.line())
    if s.get("out"):
        os.makedirs(s["out"], exist_ok=True)
    if not all(r.passed for r in results):
        raise CliError("selftest failed: " + ", ".join(r.name for r in results if not r.passed))
    return {"checks": {r.name: r.passed for r in results}}


HANDLERS: dict[str, Callable[[dict], dict]] = {
    "prepare-ssd": lambda s: cmd_prepare(s, "ssd"),
    "prepare-ssp": lambda s: cmd_prepare(s, "ssp"),
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "call": cmd_call,
    "saliency": cmd_saliency,
    "logo": cmd_logo,
    "scan-polyat": cmd_scan_polyat,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------- driver

def _versions() -> dict[str, str]:
    return {"circformer": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_run_manifest(out_dir: str, sub: str, argv: Sequence[str], settings: dict,
                       result: dict, timings: dict) -> str:
    manifest = {"subcommand": sub, "argv": list(argv), "settings": settings, "seed": settings["seed"],
                "versions": _versions(), "timings": timings,
                "outputs": [os.path.basename(p) for p in result.get("outputs", [])]}
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def execute(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.subcommand:
            raise UsageError(parser.format_usage().strip() + "\ncircformer: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    sub = ns.subcommand
    t0 = time.perf_counter()
    try:
        settings = resolve_settings(sub, ns)
        logging.basicConfig(level=getattr(logging, str(settings["log_level"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if settings["workers"] < 1:
            raise CliError("--workers must be >= 1")
        result = HANDLERS[sub](settings)
    except (CliError, ValueError, KeyError, OSError, RoutingError, Tr.TrainingError,
            FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        one_line = "; ".join(part.strip() for part in str(msg).splitlines() if part.strip())
        print(f"circformer {sub}: error: {one_line}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0
    if settings.get("out"):
        os.makedirs(settings["out"], exist_ok=True)
        write_run_manifest(settings["out"], sub, argv, settings, result, {"total_seconds": round(elapsed, 3)})
    return 0


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
