import json
import shutil

import pytest
import yaml

from dense.cli import main
from dense.corpus import write_notes_csv
from dense.pipeline import (
    STAGE_NAMES,
    ConfigError,
    Pipeline,
    StageError,
    config_from_dict,
    default_config_dict,
    load_config,
)
from dense.synthetic import DEFAULT_COVERAGE, SyntheticCorpusSpec, generate_synthetic_corpus
from dense.taxonomy import CanonicalNoteType

T = CanonicalNoteType


@pytest.fixture(scope="module")
def corpus_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "notes.csv"
    coverage = dict(DEFAULT_COVERAGE)
    coverage[T.PROGRESS_NOTES] = 0.6
    write_notes_csv(generate_synthetic_corpus(SyntheticCorpusSpec(10, 5, 5, coverage, seed=11)), path)
    return path


def _write_config(tmp_path, csv_path, workdir="work", **overrides):
    raw = default_config_dict(str(csv_path), workdir)
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        raw[section][key] = value
    path = tmp_path / "dense.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path


def _ran(outcomes):
    return [o.stage for o in outcomes if o.ran]


def test_offline_smoke_run_and_rerun(tmp_path, corpus_csv, capsys):
    cfg = _write_config(tmp_path, corpus_csv)
    assert main(["run", "--config", str(cfg)]) == 0
    work = tmp_path / "work"
    report = json.loads((work / "report.json").read_text())
    assert report["means"]["soap_score"] == 4.0
    assert report["extra"]["failed_visits"] == 0
    assert "Alignment Ratio (Gen/Gold)" in (work / "report.txt").read_text()
    assert not (work / "error.json").exists()
    capsys.readouterr()
    assert main(["run", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.count("skipped (up to date)") == len(STAGE_NAMES)


def test_deleted_chunk_store_reruns_only_chunk(tmp_path, corpus_csv):
    config = load_config(_write_config(tmp_path, corpus_csv))
    Pipeline(config).run()
    before = (tmp_path / "work" / "report.json").read_bytes()
    (tmp_path / "work" / "chunks.jsonl").unlink()
    outcomes = Pipeline(config).run()
    # The rebuilt chunk store is byte-identical, so nothing downstream sees a changed input.
    assert _ran(outcomes) == ["chunk"]
    assert (tmp_path / "work" / "report.json").read_bytes() == before


def test_changed_window_reruns_downstream_only(tmp_path, corpus_csv):
    Pipeline(load_config(_write_config(tmp_path, corpus_csv))).run()
    changed = load_config(_write_config(tmp_path, corpus_csv, chunking__window_size=60, chunking__overlap=10))
    outcomes = Pipeline(changed).run()
    assert _ran(outcomes) == ["chunk", "index", "generate", "evaluate", "report"]


def test_tampered_output_is_regenerated(tmp_path, corpus_csv):
    config = load_config(_write_config(tmp_path, corpus_csv))
    Pipeline(config).run()
    (tmp_path / "work" / "report.txt").write_text("edited", encoding="utf-8")
    assert _ran(Pipeline(config).run()) == ["report"]
    assert _ran(Pipeline(config).run(force=True)) == list(STAGE_NAMES)


def test_missing_upstream_names_the_stage(tmp_path, corpus_csv):
    config = load_config(_write_config(tmp_path, corpus_csv))
    with pytest.raises(StageError, match="'preprocess'"):
        Pipeline(config).run_stage("chunk")


def test_stage_failure_writes_error_file(tmp_path, corpus_csv):
    cfg = _write_config(tmp_path, corpus_csv)
    assert main(["generate", "--config", str(cfg)]) == 1
    err = json.loads((tmp_path / "work" / "error.json").read_text())
    assert err["stage"] == "generate" and err["error_type"] == "StageError"
    assert "pivot" in err["message"]


def test_bad_input_file_is_a_stage_failure(tmp_path):
    cfg = _write_config(tmp_path, tmp_path / "missing.csv")
    assert main(["ingest", "--config", str(cfg)]) == 1
    assert json.loads((tmp_path / "work" / "error.json").read_text())["stage"] == "ingest"


def test_stage_by_stage_matches_single_run(tmp_path, corpus_csv):
    a = _write_config(tmp_path, corpus_csv, workdir="a")
    assert main(["run", "--config", str(a)]) == 0
    b = _write_config(tmp_path, corpus_csv, workdir="b")
    for stage in STAGE_NAMES:
        assert main([stage, "--config", str(b)]) == 0
    for name in ("report.json", "report.txt", "generated.jsonl", "pair_scores.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_jobs_match_serial(tmp_path, corpus_csv):
    serial = load_config(_write_config(tmp_path, corpus_csv, workdir="serial"))
    Pipeline(serial).run()
    parallel = load_config(_write_config(tmp_path, corpus_csv, workdir="parallel"))
    Pipeline(parallel, jobs=4).run()
    assert (tmp_path / "serial" / "report.json").read_bytes() == (tmp_path / "parallel" / "report.json").read_bytes()


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"chunking": {"window_size": 100, "overlap": 100}}, "chunking.overlap"),
        ({"chunking": {"window_size": "big"}}, "chunking.window_size"),
        ({"retrieval": {"k_global": 0}}, "retrieval.k_global"),
        ({"cohort": {"min_visits": 0}}, "cohort.min_visits"),
        ({"cohort": {"require_type": "bogus"}}, "cohort.require_type"),
        ({"providers": {"generate": {"offline": False}}}, "providers.generate.url"),
        ({"providers": {"generate": {"colour": 1}}}, "providers.generate"),
    ],
)
def test_config_errors_name_the_field(patch, field):
    raw = default_config_dict()
    for section, values in patch.items():
        if section == "providers":
            for name, sub in values.items():
                raw["providers"][name].update(sub)
        else:
            raw[section].update(values)
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(raw, env={})


def test_missing_input_path_is_a_config_error():
    with pytest.raises(ConfigError, match="paths.input_csv"):
        config_from_dict({"paths": {}}, env={})


def test_cli_config_error_exit_code(tmp_path, corpus_csv, capsys):
    cfg = _write_config(tmp_path, corpus_csv, chunking__overlap=5000)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "chunking.overlap" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_env_overrides_and_offline_flag():
    raw = default_config_dict()
    for name in ("embed_retrieval", "embed_eval", "generate"):
        raw["providers"][name]["offline"] = False
    env = {"DENSE_EMBED_URL": "http://embed", "DENSE_GEN_URL": "http://gen", "DENSE_API_KEY": "k"}
    cfg = config_from_dict(raw, env=env)
    assert cfg.embed_retrieval.url == cfg.embed_eval.url == "http://embed"
    assert cfg.generate.url == "http://gen" and cfg.api_key == "k"
    forced = config_from_dict(raw, env={}, offline=True)
    assert forced.generate.offline and forced.embed_eval.offline


def test_synth_cli(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--patients", "3", "--min-visits", "2", "--max-visits", "4", "--seed", "5", "--out", str(a)]) == 0
    assert main(["synth", "--patients", "3", "--min-visits", "2", "--max-visits", "4", "--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["synth", "--patients", "0", "--out", str(tmp_path / "c.csv")]) == 2
    assert not (tmp_path / "c.csv").exists()
    assert main(["synth", "--patients", "2", "--coverage", "progress_notes=1.0", "--out", str(tmp_path / "d.csv")]) == 0
    with pytest.raises(SystemExit):
        main(["synth", "--coverage", "nonsense=1", "--out", str(tmp_path / "e.csv")])


def test_validate_rules_cli(tmp_path, capsys):
    assert main(["validate-rules"]) == 0
    bad = tmp_path / "rules.tsv"
    bad.write_text("5\tconsult\t\tconsult_notes\n5\tcardiology\t\tconsult_notes\n", encoding="utf-8")
    assert main(["validate-rules", "--rules", str(bad)]) == 1
    assert "ERROR" in capsys.readouterr().out


def test_init_config_round_trips(tmp_path, corpus_csv):
    out = tmp_path / "dense.yaml"
    assert main(["init-config", "--out", str(out), "--input-csv", str(corpus_csv)]) == 0
    assert main(["init-config", "--out", str(out)]) == 2
    cfg = load_config(out, env={})
    assert cfg.window_size == 3000 and cfg.overlap == 300 and cfg.input_csv == corpus_csv


def test_cohort_filter_applies(tmp_path, corpus_csv):
    config = load_config(_write_config(tmp_path, corpus_csv, cohort__min_visits=6))
    Pipeline(config).run_stage("ingest")
    Pipeline(config).run_stage("classify")
    Pipeline(config).run_stage("pivot")
    assert (tmp_path / "work" / "timelines.jsonl").read_text() == ""
    shutil.rmtree(tmp_path / "work")
