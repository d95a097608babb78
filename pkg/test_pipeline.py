"""End-to-end engine runs: classifier, identifiers, ensemble and report"""
import pytest

from classify import train_baseline_classifier
from corpus import DEV, TEST, TRAIN, split_corpus
from ensemble import fit_weights
from errors import DataFormatError, StructuralError
from identify import CONFIG_CONTEXT, CONFIG_NUMERIC, train_baseline_identifier
from metrics import ENSEMBLE, build_report, irr_table
from pipeline import load_engine_outputs, run_engine, save_engine_outputs
from syngen import GeneratorConfig, generate_corpus, gold_corpus, simulate_raters


def _train_engine(corpus, seed=0):
    """Split, train both baselines, fit per-slot weights"""
    assignment = split_corpus(corpus, seed=seed)
    train, dev = corpus.subset(assignment.ids(TRAIN)), corpus.subset(assignment.ids(DEV))
    classifier = train_baseline_classifier(train, dev, seed)
    members = [
        train_baseline_identifier(train, dev, seed, "ctx", config=CONFIG_CONTEXT),
        train_baseline_identifier(train, dev, seed, "num", config=CONFIG_NUMERIC),
    ]
    return assignment, classifier, members, fit_weights(members, dev)


@pytest.fixture(scope="module")
def engine_run(small_generated):
    corpus, _ = small_generated
    assignment, classifier, members, fitted = _train_engine(corpus)
    test_ids = assignment.ids(TEST)
    engine = run_engine(corpus, test_ids, classifier, members, fitted)
    return corpus, assignment, classifier, members, fitted, engine


def test_engine_has_one_row_per_case(engine_run):
    corpus, assignment, *_, engine = engine_run
    expected = sum(corpus.prompts[r.prompt_id].V for r in corpus.subset(assignment.ids(TEST)).records)
    assert len(engine) == expected
    assert {"value:ctx", "value:num", f"value:{ENSEMBLE}", "decision"} <= set(engine.columns)
    sums = engine[["p_zero", "p_one", "p_other"]].sum(axis=1)
    assert sums.round(9).eq(1.0).all()


def test_engine_is_worker_independent(engine_run):
    corpus, assignment, classifier, members, fitted, engine = engine_run
    again = run_engine(corpus, assignment.ids(TEST), classifier, members, fitted, workers=4)
    assert again.equals(engine)


def test_engine_report(engine_run):
    corpus, assignment, *_, engine = engine_run
    report = build_report(corpus, engine, assignment.ids(TEST))
    total = report.prompt_table.set_index("prompt_id").loc["Total"]
    assert total["eng_k0"] >= 0.8
    assert total[f"p:{ENSEMBLE}"] >= 0.8
    assert total[f"p:{ENSEMBLE}"] >= min(total["p:ctx"], total["p:num"])


def test_engine_outputs_round_trip(engine_run, tmp_path):
    corpus, assignment, *_, engine = engine_run
    path = tmp_path / "engine.jsonl"
    save_engine_outputs(engine, path)
    loaded = load_engine_outputs(path)
    first = build_report(corpus, engine, assignment.ids(TEST)).to_text()
    second = build_report(corpus, loaded, assignment.ids(TEST)).to_text()
    assert first == second
    save_engine_outputs(loaded, tmp_path / "again.jsonl")
    assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_engine_outputs_bad_probabilities(tmp_path):
    path = tmp_path / "engine.jsonl"
    path.write_text(
        '{"format": "valueid-engine", "version": 1}\n'
        '{"engine_class": "0", "probabilities": ["0.5", "0.5"], "prompt_id": "p1", '
        '"response_id": "r1", "slot_id": "s1", "values": {}}\n',
        encoding="utf-8",
    )
    with pytest.raises(DataFormatError) as excinfo:
        load_engine_outputs(path)
    assert excinfo.value.line == 2


def test_engine_needs_every_member(engine_run):
    corpus, assignment, classifier, members, fitted, _ = engine_run
    with pytest.raises(StructuralError, match="num"):
        run_engine(corpus, assignment.ids(TEST), classifier, members[:1], fitted)


# =============================================================================
# FULL-SIZE ACCEPTANCE
# =============================================================================

@pytest.mark.slow
def test_zero_noise_full_size_run():
    prompts, gold = generate_corpus(GeneratorConfig())
    corpus = gold_corpus(prompts, gold)
    assignment, classifier, members, fitted = _train_engine(corpus, seed=1)
    engine = run_engine(corpus, assignment.ids(TEST), classifier, members, fitted, workers=4)
    total = build_report(corpus, engine, assignment.ids(TEST)).prompt_table.set_index("prompt_id").loc["Total"]
    for column in ("eng_k0", "eng_k1", "eng_kv", f"p:{ENSEMBLE}"):
        assert total[column] >= 0.95, column


@pytest.mark.slow
def test_full_size_rater_agreement():
    prompts, gold = generate_corpus(GeneratorConfig())
    corpus = simulate_raters(gold_corpus(prompts, gold), rate=0.1, seed=8)
    total = irr_table(corpus).set_index("prompt_id").loc["Total"]
    assert total["irr_p"] == pytest.approx(0.9, abs=0.02)
