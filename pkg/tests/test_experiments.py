import json
from pathlib import Path

import pytest

from conftest import SMALL_WORLD
from uniret.experiments import ExperimentSpec, Workspace, run_experiment, write_results

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"
TINY = {"epochs": 2, "dim": 16, "vocab_size": 512, "batch_size": 8}
SMALL = {k: getattr(SMALL_WORLD, k) for k in ("n_pages", "passages_per_page", "n_filler", "topic_words", "seed")}


@pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_configs_parse(path):
    spec = ExperimentSpec.load(path)
    assert spec.name == path.stem


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown experiment keys"):
        ExperimentSpec.from_json({"name": "x", "kind": "multitask", "datasets": ["a"], "colour": 1})
    with pytest.raises(ValueError):
        ExperimentSpec("x", "nope", ["a"])
    with pytest.raises(ValueError):
        ExperimentSpec("x", "zero_few_shot", ["a", "b"], held_out="c")
    with pytest.raises(ValueError):
        ExperimentSpec("x", "variants", ["a"], variants=["wide"])


def spec(kind, **kw):
    base = dict(name=f"t-{kind}", kind=kind, datasets=["kwqa", "slot"], train=TINY, synthetic=SMALL)
    base.update(kw)
    return ExperimentSpec(**base)


@pytest.fixture(scope="module")
def ws():
    return Workspace.build(spec("multitask"))


def test_multitask_rows(ws, tmp_path):
    (res,) = run_experiment(spec("multitask"), workspace=ws)
    assert list(res.reports) == ["bm25", "single:kwqa", "single:slot", "multi"]
    (root,) = write_results([res], tmp_path)
    summary = json.loads((root / "summary.json").read_text())
    assert set(summary["rows"]) == set(res.reports)
    assert (root / "multi.uenc").exists() and (root / "table.csv").exists()


def test_zero_few_shot_rows(ws):
    s = spec("zero_few_shot", held_out="kwqa", few_shot_sizes=[16])
    (res,) = run_experiment(s, workspace=ws)
    assert list(res.reports) == ["bm25", "zero-shot", "few-shot:16", "scratch:16"]
    # Step 0 is a selection candidate, so fine-tuning never ends below its starting point on validation.
    assert res.reports["few-shot:16"].macro_page >= res.reports["zero-shot"].macro_page


def test_variants_rows(ws):
    (res,) = run_experiment(spec("variants"), workspace=ws)
    assert list(res.reports) == ["shared", "task_markers", "task_specific"]


def test_adversarial_rows_and_clean_mining(ws, tmp_path):
    (res,) = run_experiment(spec("adversarial"), workspace=ws)
    assert list(res.reports) == ["round1", "round2"]
    assert res.extras["mined"] > 0 and res.extras["violations"] == []
    (root,) = write_results([res], tmp_path)
    assert (root / "mined.jsonl").exists()


def test_same_seed_same_bytes(ws, tmp_path):
    s = spec("multitask", datasets=["slot"])
    a = write_results(run_experiment(s, workspace=ws), tmp_path / "a")[0]
    b = write_results(run_experiment(s, workspace=Workspace.build(s)), tmp_path / "b")[0]
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_data_dir_workspace(tmp_path):
    from uniret.synthetic import generate

    generate(SMALL_WORLD).save(tmp_path)
    ws = Workspace.build(spec("multitask", data_dir=str(tmp_path)))
    assert len(ws.passages) == SMALL_WORLD.n_pages * SMALL_WORLD.passages_per_page
