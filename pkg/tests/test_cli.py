import json
import math

import numpy as np
import pytest

from hicg import ConfigError
from hicg.cli import main
from hicg.config import PRESETS, build_config, load_config, parse_text
from hicg.data import parse_event_log, read_manifest
from hicg.evaluation import evaluate
from hicg.synthetic import SyntheticSpec, follows_rule, generate_sessions, generate_synthetic, transition_table

from conftest import fixture_csv


# -- config -----------------------------------------------------------------


def test_config_text_round_trip():
    cfg = build_config(overrides={"dim": 16, "behaviors": "view,buy", "train_fraction": "1/64"}, env={})
    again = build_config(parse_text(cfg.to_text()), env={})
    assert again == cfg and again.digest() == cfg.digest()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_load(tmp_path, name):
    path = tmp_path / "c.conf"
    path.write_text(f"include = preset:{name}\nepochs = 3\n")
    cfg = load_config(path, env={})
    assert cfg.epochs == 3 and cfg.behavior_list[0] == "view"


def test_preset_values():
    cfg = build_config(parse_text("include = preset:yoochoose-1-64"), env={})
    assert cfg.train_fraction == "1/64" and cfg.behavior_list == ["view", "buy"]


def test_env_then_override_precedence():
    raw = parse_text("dim = 32\nseed = 1")
    cfg = build_config(raw, env={"HICG_DIM": "16"})
    assert cfg.dim == 16 and cfg.seed == 1
    cfg = build_config(raw, env={"HICG_DIM": "16"}, overrides={"dim": 8})
    assert cfg.dim == 8


def test_plain_mode_disables_contrastive_task():
    assert build_config(overrides={"mode": "hicg"}, env={}).hyperparams().lambda_cl == 0
    assert build_config(overrides={"mode": "hicg-cl"}, env={}).hyperparams().lambda_cl == pytest.approx(0.1)


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_text("no_such_key = 1")
    with pytest.raises(ConfigError):
        parse_text("include = preset:nope")
    with pytest.raises(ConfigError):
        build_config({"dim": "abc"}, env={})


# -- synthetic generator ------------------------------------------------------


def test_noise_free_replay_follows_rule():
    spec = SyntheticSpec(n_items=30, n_sessions=300, seed=4)
    table = transition_table(spec)
    assert all(follows_rule(rows, table) for rows in generate_sessions(spec))
    # the behavior type matters at every item
    assert (table[0] != table[1]).all()


def test_generator_deterministic():
    spec = SyntheticSpec(n_sessions=200, seed=3)
    assert generate_synthetic(spec) == generate_synthetic(SyntheticSpec(n_sessions=200, seed=3))
    assert generate_synthetic(spec) != generate_synthetic(SyntheticSpec(n_sessions=200, seed=4))


def test_generator_event_volume():
    events = parse_event_log(generate_synthetic(SyntheticSpec(n_sessions=2000)))
    assert 8000 <= len(events) <= 20000


def test_clusters_keep_transitions_inside():
    spec = SyntheticSpec(n_items=40, n_clusters=4, noise=0.3, n_sessions=200)
    for rows in generate_sessions(spec):
        assert len({spec.cluster_of(i) for i, _, _ in rows}) == 1


# -- command line -------------------------------------------------------------


def write_conf(path, **kw):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kw.items()))
    return path


def fixture_conf(tmp_path):
    raw = tmp_path / "events.csv"
    raw.write_bytes(fixture_csv())
    return write_conf(tmp_path / "fixture.conf", raw_input=raw, processed_dir=tmp_path / "proc",
                      min_item_freq=2, test_window_days=1, behaviors="view,cart,buy")


def test_preprocess_fixture_manifest(tmp_path, capsys):
    conf = fixture_conf(tmp_path)
    assert main(["preprocess", "--config", str(conf)]) == 0
    m = read_manifest(tmp_path / "proc" / "manifest.txt")
    assert (m["n_train_sessions"], m["n_test_sessions"], m["n_items"]) == ("5", "2", "4")
    assert (m["n_views"], m["n_conversions"]) == ("15", "4")
    first = m["checksum"]
    assert main(["preprocess", "--config", str(conf)]) == 0
    assert read_manifest(tmp_path / "proc" / "manifest.txt")["checksum"] == first
    assert f"checksum={first}" in capsys.readouterr().out


def test_preprocess_missing_input_fails(tmp_path, capsys):
    conf = write_conf(tmp_path / "c.conf", raw_input=tmp_path / "absent.csv", processed_dir=tmp_path / "p")
    code = main(["preprocess", "--config", str(conf)])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "DataError"


def test_bad_config_exit_code(tmp_path, capsys):
    conf = write_conf(tmp_path / "c.conf", bogus=1)
    assert main(["preprocess", "--config", str(conf)]) == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = root / "synthetic.csv"
    assert main(["generate", "--out", str(raw), "--n-items", "20", "--n-sessions", "300", "--seed", "1"]) == 0
    conf = write_conf(root / "run.conf", raw_input=raw, processed_dir=root / "proc", checkpoint_dir=root / "runs",
                      report_path=root / "report.json", behaviors="view,cart", min_item_freq=1,
                      test_window_days=3, dim=8, batch_size=50, epochs=2, learning_rate=0.01)
    assert main(["preprocess", "--config", str(conf)]) == 0
    run = root / "run-a"
    assert main(["train", "--config", str(conf), "--mode", "hicg", "--out", str(run)]) == 0
    return root, conf, run


def test_train_outputs(workspace):
    _, _, run = workspace
    for name in ("config.txt", "epochs.log", "metrics.jsonl", "checkpoint.pt", "curves.png"):
        assert (run / name).stat().st_size > 0
    lines = (run / "epochs.log").read_text().splitlines()
    assert len(lines) == 2
    assert all(" l_cl=0.000000 " in line for line in lines)


def test_train_same_seed_same_first_epoch(workspace):
    root, conf, run = workspace
    again = root / "run-b"
    assert main(["train", "--config", str(conf), "--mode", "hicg", "--out", str(again), "--epochs", "1"]) == 0

    def l_total(path):
        first = path.read_text().splitlines()[0]
        return dict(kv.split("=") for kv in first.split())["l_total"]

    assert l_total(run / "epochs.log") == l_total(again / "epochs.log")


def test_evaluate_with_baselines(workspace, capsys):
    root, conf, run = workspace
    report = root / "eval" / "r.json"
    assert main(["evaluate", "--config", str(conf), "--checkpoint", str(run / "checkpoint.pt"),
                 "--baselines", "--report", str(report)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[:3] == ["model", "n", "HR@5"]
    assert [row.split("\t")[0] for row in out[1:]] == ["hicg", "s-pop", "iknn"]
    payload = json.loads(report.read_text())
    assert set(payload["results"]) == {"hicg", "s-pop", "iknn"}
    for block in payload["results"].values():
        assert 0 <= block["metrics"]["5"]["MRR"] <= block["metrics"]["5"]["HR"] <= block["metrics"]["20"]["HR"]
    assert report.with_suffix(".tsv").exists() and report.with_suffix(".png").stat().st_size > 0


def test_evaluate_rejects_other_vocabulary(workspace, tmp_path, capsys):
    _, _, run = workspace
    conf = fixture_conf(tmp_path)
    assert main(["preprocess", "--config", str(conf)]) == 0
    code = main(["evaluate", "--config", str(conf), "--checkpoint", str(run / "checkpoint.pt")])
    assert code == 3
    assert "vocab" in json.loads(capsys.readouterr().err)["message"]


def test_evaluate_missing_checkpoint(workspace, capsys):
    root, conf, _ = workspace
    assert main(["evaluate", "--config", str(conf), "--checkpoint", str(root / "nope.pt")]) == 3


def _recommend(conf, run, capsys, *extra):
    assert main(["recommend", "--config", str(conf), "--checkpoint", str(run / "checkpoint.pt"),
                 "--session", "item3:view,item5:cart", *extra]) == 0
    return [line.split("\t") for line in capsys.readouterr().out.splitlines()]


def test_recommend(workspace, capsys):
    _, conf, run = workspace
    full = _recommend(conf, run, capsys, "--full")
    top = _recommend(conf, run, capsys, "--k", "1")
    assert top == full[:1]
    assert math.isclose(sum(float(s) for _, s in full), 1.0, abs_tol=1e-5)
    scores = [float(s) for _, s in full]
    assert scores == sorted(scores, reverse=True)
    assert _recommend(conf, run, capsys, "--k", "5") == full[:5]


def test_recommend_unknown_item(workspace, capsys):
    _, conf, run = workspace
    code = main(["recommend", "--config", str(conf), "--checkpoint", str(run / "checkpoint.pt"),
                 "--session", "nosuchitem"])
    assert code == 3


def test_perfect_oracle_scores_one(workspace):
    from hicg.data import read_dataset, split_sessions

    root, _, _ = workspace
    ds = read_dataset(root / "proc")
    samples = split_sessions(ds.test_sessions, ds.target_type)[:5]

    def oracle(s):
        v = np.zeros(ds.n_items)
        v[s.label_item] = 1
        return v

    rep = evaluate(oracle, samples)
    assert rep.hr[5] == rep.mrr[5] == rep.hr[20] == rep.mrr[20] == 1.0
