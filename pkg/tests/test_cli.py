from __future__ import annotations

import json

import numpy as np
import pytest

from circformer import cli, synthetic
from circformer.genome_io import format_annotations, format_fasta

TINY = ["--embed-dim", "8", "--conv-blocks", "1", "--dilations", "1", "--kernel-size", "3",
        "--attn-blocks", "1", "--heads", "2", "--random-features", "8"]


@pytest.fixture(scope="module")
def corpus_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    c = synthetic.plant_corpus(n_species=2, genome_length=6000, n_circ=4, span=(60, 400), seed=0)
    paths = []
    for sp in c.species:
        p = d / f"{sp}.fa"
        p.write_text(format_fasta(c.genomes[sp].values()))
        paths.append(f"{sp}={p}")
    ann = d / "ann.tsv"
    ann.write_text(format_annotations(c.annotations))
    return d, paths, str(ann), c


def run(*argv):
    return cli.execute([str(a) for a in argv])


def genome_flags(paths):
    return [x for p in paths for x in ("--genome", p)]


@pytest.fixture(scope="module")
def pipeline(corpus_files):
    d, paths, ann, corpus = corpus_files
    assert run("prepare-ssd", *genome_flags(paths), "--ann", ann, "--window", 41, "--out", d / "ssd") == 0
    assert run("prepare-ssp", *genome_flags(paths), "--ann", ann, "--context", 21, "--neg-ratio", 2,
               "--out", d / "ssp") == 0
    assert run("train", "--data", d / "ssd", "--epochs", 2, *TINY, "--out", d / "m") == 0
    return d, paths, ann, corpus


def test_prepare_writes_dataset_and_manifest(pipeline):
    d = pipeline[0]
    assert (d / "ssd" / "ssd.tsv").exists() and (d / "ssd" / "manifest.txt").exists()
    man = json.loads((d / "ssd" / "run_manifest.json").read_text())
    assert man["subcommand"] == "prepare-ssd" and man["seed"] == 0
    assert man["settings"]["window"] == 41
    assert set(man["versions"]) == {"circformer", "numpy", "python"}


def test_train_outputs(pipeline):
    d = pipeline[0]
    lines = (d / "m" / "train_log.txt").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=0\ttask=ssd")
    assert (d / "m" / "model.cfme").exists()


def test_predict_eval_and_call(pipeline):
    d, paths, ann, corpus = pipeline
    sp = corpus.species[0]
    genome = paths[0].split("=", 1)[1]
    ck = d / "m" / "model.cfme"
    assert run("predict", "--genome", genome, "--checkpoint", ck, "--species", sp, "--window", 41,
               "--out", d / "p") == 0
    rows = (d / "p" / "track.tsv").read_text().splitlines()
    assert sum(1 for r in rows if not r.startswith("#")) == 6000
    assert run("predict", "--genome", genome, "--checkpoint", ck, "--species", sp, "--window", 41,
               "--format", "binary", "--out", d / "pb") == 0
    assert (d / "pb" / "chr1.cftk").exists()
    assert run("eval", "--checkpoint", ck, "--data", d / "ssd", "--out", d / "e") == 0
    report = (d / "e" / "report.tsv").read_text()
    assert "top_k_accuracy" in report and report.startswith("# checkpoint")
    assert run("eval", "--track", d / "p" / "track.tsv", "--ann", ann, "--species", sp,
               "--out", d / "e2") == 0
    assert run("call", "--genome", genome, "--checkpoint", ck, "--species", sp, "--window", 41,
               "--context", 21, "--max-span", 500, "--out", d / "c") == 0
    assert (d / "c" / "calls.tsv").exists()


def test_finetune_ssp_and_eval(pipeline):
    d, _, _, corpus = pipeline
    sp = corpus.species[1]
    assert run("finetune", "--data", d / "ssp", "--checkpoint", d / "m" / "model.cfme",
               "--species", sp, "--epochs", 1, "--out", d / "ft") == 0
    assert (d / "ft" / f"ssp_{sp}.cfme").exists()
    assert run("eval", "--task", "ssp", "--checkpoint", d / "ft" / f"ssp_{sp}.cfme",
               "--data", d / "ssp", "--out", d / "fe") == 0
    assert "balanced_accuracy" in (d / "fe" / "report.tsv").read_text()


def test_saliency_logo_and_polyat(pipeline):
    d, paths, ann, corpus = pipeline
    assert run("saliency", *genome_flags(paths), "--ann", ann, "--checkpoint", d / "m" / "model.cfme",
               "--radius", 20, "--max-sites", 3, "--out", d / "s") == 0
    sp = corpus.species[0]
    prof = cli.X.read_saliency_tsv(d / "s" / f"saliency_{sp}.tsv")
    assert prof.radius == 20 and prof.n_sequences == 3
    assert run("logo", "--saliency-dir", d / "s", "--radius", 5) == 0
    rows = (d / "s" / f"logo_{sp}.tsv").read_text().splitlines()[1:]
    assert len(rows) == 11
    for r in rows:
        w = [float(v) for v in r.split("\t")[1:]]
        assert sum(w) == pytest.approx(1.0, abs=1e-6) or sum(w) == 0
    assert run("scan-polyat", *genome_flags(paths), "--ann", ann, "--trials", 2000, "--out", d / "pa") == 0
    text = (d / "pa" / "polyat.tsv").read_text()
    assert "exact_dp\t0.133" in text and "reference_baseline\t0.174000" in text


def test_selftest_passes():
    assert run("selftest") == 0


def test_usage_errors_exit_2(capsys):
    assert run("train", "--epochs", "x") == 2
    assert run("no-such-command") == 2
    assert run() == 2
    assert "usage" in capsys.readouterr().err


def test_validation_errors_exit_1(tmp_path, capsys, corpus_files):
    _, paths, ann, _ = corpus_files
    assert run("train", "--out", tmp_path) == 1
    assert "missing required setting(s): --data" in capsys.readouterr().err
    assert run("prepare-ssd", "--genome", tmp_path / "none.fa", "--ann", ann, "--out", tmp_path) == 1
    assert "genome FASTA not found" in capsys.readouterr().err
    bad = tmp_path / "bad.tsv"
    bad.write_text("sp0\tchr1\t10\t999999\tx\n")
    assert run("prepare-ssd", *genome_flags(paths), "--ann", bad, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "position out of range" in err and err.count("\n") == 1


def test_config_precedence(tmp_path, corpus_files):
    _, paths, ann, _ = corpus_files
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\nseed = 7\nembed-dim = 99\n[prepare-ssd]\nwindow = 31\nneg-per-window = 1.0\n")
    ns = cli.build_parser().parse_args(["prepare-ssd", "--config", str(cfg), "--window", "21"])
    s = cli.resolve_settings("prepare-ssd", ns)
    assert (s["window"], s["neg_per_window"], s["seed"]) == (21, 1.0, 7)
    assert "embed_dim" not in s
    cfg.write_text("[prepare-ssd]\nwindw = 31\n")
    with pytest.raises(cli.CliError, match="unknown keys"):
        cli.resolve_settings("prepare-ssd", ns)


def test_config_without_header_and_list_values(tmp_path):
    cfg = tmp_path / "flat.cfg"
    cfg.write_text("dilations = 1, 2\nmoe = no\n")
    ns = cli.build_parser().parse_args(["train", "--config", str(cfg)])
    s = cli.resolve_settings("train", ns)
    assert s["dilations"] == (1, 2) and s["moe"] is False
