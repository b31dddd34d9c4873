import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from methmark import synth
from methmark.cli import main as cli_main
from methmark.errors import StageError
from methmark.pipeline import STAGES, PipelineRunner, RunConfig, run_pipeline


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("cohort")
    spec = synth.planted_community_spec(
        m=20, community_size=5, effect=1.0,
        n_healthy=30, n_train=80, n_test=80, seed=42,
    )
    res = synth.generate(spec)
    paths = synth.write_cohort(res, outdir)
    return paths, res


def _config(paths, outdir, **kwargs) -> RunConfig:
    base = dict(
        methylation_healthy=paths["healthy"],
        methylation_train=paths["tumour_train"],
        methylation_test=paths["tumour_test"],
        clinical=paths["clinical"],
        expression=paths["expression"],
        output_dir=str(outdir),
        seed=42,
    )
    base.update(kwargs)
    return RunConfig(**base)


def _tree_hashes(outdir) -> dict[str, str]:
    out = {}
    for p in sorted(Path(outdir).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(outdir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_full_run_lists_thirteen_stages(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    statuses = run_pipeline(cfg)
    assert [s.name for s in statuses] == list(STAGES)
    assert not any(s.cached for s in statuses)
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert len(manifest["stages"]) == 13
    for entry in manifest["stages"].values():
        assert entry["outputs"]


def test_rerun_unchanged_all_cached(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    run_pipeline(cfg)
    before = _tree_hashes(tmp_path / "run")
    statuses = run_pipeline(cfg)
    assert all(s.cached for s in statuses)
    assert _tree_hashes(tmp_path / "run") == before


def test_delete_artifact_recomputes_downstream_only(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    run_pipeline(cfg)
    (tmp_path / "run" / "edges.csv").unlink()
    statuses = {s.name: s.cached for s in run_pipeline(cfg)}
    upstream = ("ingest", "moments", "interactions", "waldfield", "nodeweights")
    assert all(statuses[name] for name in upstream)
    downstream = ("adjacency", "component", "blockcount", "partition",
                  "train_scores", "test_scores", "validation", "concordance")
    assert not any(statuses[name] for name in downstream)


def test_tampering_detected(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    run_pipeline(cfg)
    target = tmp_path / "run" / "nodeweights.csv"
    target.write_text(target.read_text().replace("0.", "0.0", 1))
    statuses = {s.name: s.cached for s in run_pipeline(cfg)}
    assert not statuses["nodeweights"]
    assert statuses["waldfield"]


def test_config_change_invalidates_dependent_stages(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    run_pipeline(cfg)
    cfg2 = _config(paths, tmp_path / "run", k_override=2)
    statuses = {s.name: s.cached for s in run_pipeline(cfg2)}
    assert statuses["component"]  # upstream of blockcount: untouched
    assert not statuses["blockcount"]
    bc = json.loads((tmp_path / "run" / "blockcount.json").read_text())
    assert bc["n_blocks"] == 2 and bc["overridden"]


def test_worker_count_does_not_change_bytes(cohort, tmp_path):
    paths, _ = cohort
    cfg1 = _config(paths, tmp_path / "w1", workers=1, chunk_size=25)
    cfg2 = _config(paths, tmp_path / "w2", workers=2, chunk_size=25)
    run_pipeline(cfg1)
    run_pipeline(cfg2)
    assert _tree_hashes(tmp_path / "w1") == _tree_hashes(tmp_path / "w2")


def test_slice_requires_upstream(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "fresh")
    runner = PipelineRunner(cfg)
    with pytest.raises(StageError, match="requires stage: moments"):
        runner.run(("waldfield", "nodeweights", "adjacency"))


def test_stage_slices_compose(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "sliced")
    PipelineRunner(cfg).run(("ingest", "moments", "interactions"))
    PipelineRunner(cfg).run(("waldfield", "nodeweights", "adjacency"))
    PipelineRunner(cfg).run(("component", "blockcount", "partition"))
    PipelineRunner(cfg).run(("train_scores", "test_scores"))
    PipelineRunner(cfg).run(("validation",))
    PipelineRunner(cfg).run(("concordance",))
    manifest = json.loads((tmp_path / "sliced" / "manifest.json").read_text())
    assert len(manifest["stages"]) == 13


def test_pipeline_without_expression_skips_concordance(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "noexpr")
    cfg.expression = None
    statuses = run_pipeline(cfg)
    assert [s.name for s in statuses] == list(STAGES[:-1])


def test_artifact_formats(cohort, tmp_path):
    paths, _ = cohort
    outdir = tmp_path / "run"
    cfg = _config(paths, outdir)
    run_pipeline(cfg)
    with open(outdir / "edges.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["gene_i", "gene_j", "z", "theta", "mu_ij", "mu_ji"]
    with open(outdir / "assignment.csv") as fh:
        assert next(csv.reader(fh)) == ["gene", "block"]
    with open(outdir / "concordance.csv") as fh:
        assert next(csv.reader(fh)) == [
            "gene_i", "gene_j", "pearson_r", "pearson_p", "spearman_r", "spearman_p",
        ]
    km_files = sorted((outdir / "km").glob("*.csv"))
    assert km_files
    with open(km_files[0]) as fh:
        assert next(csv.reader(fh)) == ["time", "survival", "at_risk", "events", "group"]
    manifest = json.loads((outdir / "manifest.json").read_text())
    partition_params = manifest["stages"]["partition"]["params"]
    assert {"bandwidth", "n_blocks", "tau", "seed"} <= set(partition_params)
    # execution knobs stay out of the manifest echo
    assert "workers" not in manifest["config"]
    net = json.loads((outdir / "network.json").read_text())
    assert {"m", "n_edges", "density"} <= set(net)


def test_validation_report_schema(cohort, tmp_path):
    paths, _ = cohort
    cfg = _config(paths, tmp_path / "run")
    run_pipeline(cfg)
    reports = json.loads((tmp_path / "run" / "reports.json").read_text())
    assert "ranking" in reports
    for mk in reports["markers"]:
        assert {"community", "n_train", "n_test", "train", "test"} <= set(mk)
        for side in ("train", "test"):
            entry = mk[side]
            assert {"univariate", "multivariate", "logrank_p", "n", "evaluable"} <= set(entry)
            if entry["evaluable"] and entry["univariate"]:
                assert {"hr", "ci_lo", "ci_hi", "p"} <= set(entry["univariate"]) | {"term"}
                for term in entry["multivariate"]:
                    assert {"term", "hr", "ci_lo", "ci_hi", "p"} <= set(term)


# -- CLI ---------------------------------------------------------------------


def _write_cli_config(paths, outdir, path):
    cfg = {
        "methylation_healthy": paths["healthy"],
        "methylation_train": paths["tumour_train"],
        "methylation_test": paths["tumour_test"],
        "clinical": paths["clinical"],
        "expression": paths["expression"],
        "output_dir": str(outdir),
        "seed": 42,
    }
    path.write_text(json.dumps(cfg))
    return path


def test_cli_run_and_rerun(cohort, tmp_path, capsys):
    paths, _ = cohort
    cfg_path = _write_cli_config(paths, tmp_path / "cli_run", tmp_path / "cfg.json")
    assert cli_main(["run", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("completed") == 13
    assert cli_main(["run", "--config", str(cfg_path)]) == 0
    assert capsys.readouterr().out.count("cached") == 13


def test_cli_subcommand_order(cohort, tmp_path, capsys):
    paths, _ = cohort
    cfg_path = _write_cli_config(paths, tmp_path / "cli_steps", tmp_path / "cfg2.json")
    for cmd in ("ingest", "network", "communities", "score", "validate", "concordance"):
        assert cli_main([cmd, "--config", str(cfg_path)]) == 0
        capsys.readouterr()


def test_cli_network_without_moments_errors(cohort, tmp_path, capsys):
    paths, _ = cohort
    cfg_path = _write_cli_config(paths, tmp_path / "cli_missing", tmp_path / "cfg3.json")
    code = cli_main(["network", "--config", str(cfg_path)])
    err = capsys.readouterr().err
    assert code == 3
    assert "requires stage: moments" in err


def test_cli_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli_main(["run", "--config", str(bad)]) == 2
    missing = tmp_path / "missing.json"
    assert cli_main(["run", "--config", str(missing)]) == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"bogus_key": 1}))
    assert cli_main(["run", "--config", str(unknown)]) == 2
    capsys.readouterr()


def test_cli_data_error_exit_code(cohort, tmp_path, capsys):
    paths, _ = cohort
    broken = dict(paths)
    bad_file = tmp_path / "broken.csv"
    bad_file.write_text("probe_id,gene,s1\np1,g1,2.5\n")
    broken["healthy"] = str(bad_file)
    cfg_path = _write_cli_config(broken, tmp_path / "cli_bad_data", tmp_path / "cfg4.json")
    assert cli_main(["run", "--config", str(cfg_path)]) == 3
    capsys.readouterr()


def test_cli_simulate(tmp_path, capsys):
    spec = {
        "m": 10,
        "n_healthy": 12,
        "n_train": 15,
        "n_test": 10,
        "planted_community": {"size": 3, "effect": 1.0},
        "output_dir": str(tmp_path / "sim"),
        "seed": 7,
    }
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps(spec))
    assert cli_main(["simulate", "--config", str(cfg)]) == 0
    capsys.readouterr()
    truth = json.loads((tmp_path / "sim" / "ground_truth.json").read_text())
    assert len(truth["planted_edges"]) == 3
    for name in ("methylation_healthy.csv", "methylation_train.csv",
                 "methylation_test.csv", "clinical.csv", "expression.csv"):
        assert (tmp_path / "sim" / name).exists()


def test_cli_seed_override(cohort, tmp_path, capsys):
    paths, _ = cohort
    cfg_path = _write_cli_config(paths, tmp_path / "cli_seed", tmp_path / "cfg5.json")
    assert cli_main(["run", "--config", str(cfg_path), "--seed", "11"]) == 0
    capsys.readouterr()
    manifest = json.loads((tmp_path / "cli_seed" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 11
