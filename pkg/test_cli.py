"""Tests for the command-line surface: exit codes, outputs and replay"""
import json

import pytest

from cli import EXIT_DATA, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, run


@pytest.fixture
def generator_config(tmp_path):
    path = tmp_path / "generator.cfg"
    path.write_text("seed=5\nprompts=2\nresponses_per_prompt=150\nrater_disagreement=0.1\n")
    return path


# =============================================================================
# EXIT CODES
# =============================================================================

def test_verify_over(capsys):
    assert run(["verify", "--prompt", "p1", "--values", "9,1,2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Over(12)" in out
    assert "Over by $12" in out


def test_verify_valid_and_enumerate(capsys):
    assert run(["verify", "--prompt", "p1", "--values", "7,0,3", "--enumerate"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "24 solutions"
    assert "7,0,3" in out
    assert "Valid" in out


def test_verify_bad_values(capsys):
    assert run(["verify", "--prompt", "p1", "--values", "9,x,2"]) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_missing_corpus(tmp_path, capsys):
    assert run(["audit", "--in", str(tmp_path / "nowhere")]) == EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_malformed_responses(tmp_path, generator_config):
    out = tmp_path / "corpus"
    assert run(["gen", "--config", str(generator_config), "--out", str(out)]) == EXIT_OK
    lines = (out / "responses.jsonl").read_text(encoding="utf-8").splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    (out / "responses.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert run(["audit", "--in", str(out)]) == EXIT_DATA


def test_mask_text(capsys):
    assert run(["mask", "--text", "I bought 9 bags for $63."]) == EXIT_OK
    masked = json.loads(capsys.readouterr().out)
    assert masked["values"] == ["9", "63"]
    assert masked["template"].count("<mask>") == 2


def test_normalize_file(tmp_path):
    source = tmp_path / "answers.txt"
    source.write_text("sixty-four dollars\n1,200 candies\n", encoding="utf-8")
    out = tmp_path / "annotated.txt"
    assert run(["normalize", "--in", str(source), "--out", str(out)]) == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert "64" in lines[0]
    assert "1200" in lines[1]
    assert (tmp_path / "annotated.txt.manifest.json").exists()


# =============================================================================
# GENERATION AND REPLAY
# =============================================================================

def test_gen_is_byte_identical(tmp_path, generator_config):
    for name in ("a", "b"):
        assert run(["gen", "--config", str(generator_config), "--out", str(tmp_path / name)]) == EXIT_OK
    for name in ("prompts.jsonl", "responses.jsonl", "gold.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_writes_manifest(tmp_path, generator_config):
    out = tmp_path / "corpus"
    run(["gen", "--config", str(generator_config), "--seed", "9", "--out", str(out)])
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "gen"
    assert manifest["seeds"] == {"seed": 9}
    assert set(manifest["checksums"]) == {"prompts.jsonl", "responses.jsonl", "gold.jsonl"}


def test_replay_reproduces_split(tmp_path, generator_config, capsys):
    corpus = tmp_path / "corpus"
    splits = tmp_path / "splits.csv"
    run(["gen", "--config", str(generator_config), "--out", str(corpus)])
    assert run(["split", "--in", str(corpus), "--seed-split", "3", "--out", str(splits)]) == EXIT_OK
    manifest = tmp_path / "splits.csv.manifest.json"
    assert run(["replay", "--manifest", str(manifest)]) == EXIT_OK
    assert "reproduced 1 file" in capsys.readouterr().out


def test_replay_detects_changed_output(tmp_path, generator_config):
    corpus = tmp_path / "corpus"
    splits = tmp_path / "splits.csv"
    run(["gen", "--config", str(generator_config), "--out", str(corpus)])
    run(["split", "--in", str(corpus), "--seed-split", "3", "--out", str(splits)])
    manifest_path = tmp_path / "splits.csv.manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest["checksums"]["splits.csv"] = "0" * 64
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
    assert run(["replay", "--manifest", str(manifest_path)]) == EXIT_INVARIANT


def test_replay_rejects_garbage(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{}", encoding="utf-8")
    assert run(["replay", "--manifest", str(path)]) == EXIT_DATA


# =============================================================================
# FULL RUN
# =============================================================================

def test_full_command_chain(tmp_path, generator_config, capsys):
    corpus, splits = str(tmp_path / "corpus"), str(tmp_path / "splits.csv")
    common = ["--in", corpus, "--splits", splits]
    assert run(["gen", "--config", str(generator_config), "--out", corpus]) == EXIT_OK
    assert run(["split", "--in", corpus, "--seed-split", "1", "--out", splits]) == EXIT_OK
    assert run(["train-classifier", *common, "--seed-train", "0",
                "--out", str(tmp_path / "clf.joblib")]) == EXIT_OK
    for model_id, features in (("ctx", "context"), ("num", "numeric")):
        assert run(["train-identifier", *common, "--seed-train", "0", "--model-id", model_id,
                    "--features", features, "--out", str(tmp_path / f"{model_id}.joblib")]) == EXIT_OK
    members = ["--identifier", str(tmp_path / "ctx.joblib"), "--identifier", str(tmp_path / "num.joblib")]
    assert run(["fit-ensemble", *common, *members, "--out", str(tmp_path / "weights.csv")]) == EXIT_OK
    assert run(["evaluate", *common, *members, "--classifier", str(tmp_path / "clf.joblib"),
                "--weights", str(tmp_path / "weights.csv"), "--out", str(tmp_path / "engine.jsonl")]) == EXIT_OK
    assert run(["report", *common, "--engine", str(tmp_path / "engine.jsonl"),
                "--out", str(tmp_path / "report")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Total" in out
    for name in ("prompt_table.csv", "slot_table.csv", "regressions.csv", "report.txt"):
        assert (tmp_path / "report" / name).exists()


def test_fit_ensemble_without_members(tmp_path, generator_config):
    corpus, splits = str(tmp_path / "corpus"), str(tmp_path / "splits.csv")
    run(["gen", "--config", str(generator_config), "--out", corpus])
    run(["split", "--in", corpus, "--seed-split", "1", "--out", splits])
    code = run(["fit-ensemble", "--in", corpus, "--splits", splits, "--out", str(tmp_path / "w.csv")])
    assert code == EXIT_USAGE


# =============================================================================
# UNREADABLE INPUTS
# =============================================================================

@pytest.fixture
def corpus_and_splits(tmp_path, generator_config):
    corpus, splits = tmp_path / "corpus", tmp_path / "splits.csv"
    run(["gen", "--config", str(generator_config), "--out", str(corpus)])
    run(["split", "--in", str(corpus), "--seed-split", "1", "--out", str(splits)])
    return corpus, splits


@pytest.mark.parametrize("content", ["", "\x00\x01garbage\n\"unclosed,quote\n", "a;b;c\n1;2;3\n"])
def test_import_scores_bad_csv(corpus_and_splits, tmp_path, content, capsys):
    corpus, _ = corpus_and_splits
    scores = tmp_path / "scores.csv"
    scores.write_text(content, encoding="utf-8")
    assert run(["import-scores", "--in", str(corpus), "--scores", str(scores)]) == EXIT_DATA
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.parametrize("content", ["", "# seed=1\n", "# seed=1\n\"unclosed\n"])
def test_bad_splits_file(corpus_and_splits, tmp_path, content):
    corpus, _ = corpus_and_splits
    splits = tmp_path / "bad_splits.csv"
    splits.write_text(content, encoding="utf-8")
    code = run(["train-classifier", "--in", str(corpus), "--splits", str(splits), "--seed-train", "0",
                "--out", str(tmp_path / "clf.joblib")])
    assert code == EXIT_DATA


@pytest.mark.parametrize("payload", [b"", b"not a pickle at all", b"\x80\x04\x95garbage"])
def test_identifier_not_a_joblib_file(corpus_and_splits, tmp_path, payload, capsys):
    corpus, splits = corpus_and_splits
    model = tmp_path / "model.joblib"
    model.write_bytes(payload)
    code = run(["fit-ensemble", "--in", str(corpus), "--splits", str(splits), "--identifier", str(model),
                "--out", str(tmp_path / "w.csv")])
    assert code == EXIT_DATA
    assert capsys.readouterr().err.startswith("error:")


def test_directory_given_as_input_file(tmp_path, capsys):
    assert run(["normalize", "--in", str(tmp_path)]) == EXIT_DATA
    assert capsys.readouterr().err.startswith("error:")


def test_directory_given_as_manifest(tmp_path):
    assert run(["replay", "--manifest", str(tmp_path)]) == EXIT_DATA


def test_unexpected_failure_is_an_invariant_exit(monkeypatch, capsys):
    import cli

    def explode(args):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "mask", explode)
    assert run(["mask", "--text", "7 apples"]) == EXIT_INVARIANT
    assert "boom" in capsys.readouterr().err
