import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from roadsage.cli import main
from roadsage.graph import load_graph

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = {
    "synth": {"grid_rows": 4, "grid_cols": 4, "arterial_every": 2, "seed": 3},
    "output_dir": "out",
    "seeds": [0],
    "experiment": {
        "modes": ["supervised", "unsupervised"],
        "sage": {"hidden_units": 16, "embedding_dim": 8},
        "supervised": {"epochs": 4},
        "unsupervised": {"epochs": 2, "walks_per_node": 2},
    },
}


def write_config(folder: Path, cfg: dict, name="cfg.json") -> Path:
    folder.mkdir(parents=True, exist_ok=True)
    p = folder / name
    p.write_text(json.dumps(cfg))
    return p


def without_timestamp(path: Path) -> dict:
    res = json.loads(path.read_text())
    res.pop("created")
    return res


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    folder = tmp_path_factory.mktemp("demo")
    cfg = folder / "demo.json"
    shutil.copy(CONFIGS / "demo.json", cfg)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    return folder, cfg, folder / "demo_out"


def test_demo_pipeline_table(demo_run):
    _, _, out = demo_run
    res = json.loads((out / "results.json").read_text())
    cells = [(m, v) for m, row in res["table"].items() for v in row]
    assert len(cells) == 6
    for m, v in cells:
        assert 0.0 <= res["table"][m][v]["f1_8class"] <= 1.0
    assert len(list((out / "models").glob("*.json"))) == 6
    for name in ("srn.jsonl", "dual_orn.jsonl", "dual_srn.jsonl", "features/srn_vis.jsonl"):
        assert (out / name).exists()
        meta = json.loads((out / (name + ".meta.json")).read_text())
        assert meta["config_hash"] == res["config_hash"]


def test_pipeline_rerun_identical(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    first = without_timestamp(tmp_path / "out" / "results.json")
    models = {p.name: p.read_bytes() for p in (tmp_path / "out" / "models").iterdir()}
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert without_timestamp(tmp_path / "out" / "results.json") == first
    assert {p.name: p.read_bytes() for p in (tmp_path / "out" / "models").iterdir()} == models


def test_train_and_evaluate_match_pipeline(demo_run, tmp_path):
    _, cfg, out = demo_run
    ckpt = tmp_path / "m.json"
    assert main(["train", "--config", str(cfg), "--variant", "srn+vis", "--mode", "supervised", "--seed", "0", "--out", str(ckpt)]) == 0
    assert ckpt.read_bytes() == (out / "models" / "supervised_srn_vis_seed0.json").read_bytes()

    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(ckpt), "--config", str(cfg), "--out", str(ev)]) == 0
    res = json.loads((out / "results.json").read_text())
    cell = res["per_seed"][0]["table"]["supervised"]["SRN+Vis"]
    got = json.loads(ev.read_text())["test"]
    for k in ("f1_8class", "f1_binary"):
        assert got[k] == cell[k]


def test_stagewise_commands_match_pipeline(demo_run, tmp_path):
    _, _, out = demo_run
    data = out / "data"
    assert main(["segment", "--in", str(data / "graph.jsonl"), "--out", str(tmp_path / "srn.jsonl")]) == 0
    assert (tmp_path / "srn.jsonl").read_bytes() == (out / "srn.jsonl").read_bytes()
    assert main(["dualize", "--in", str(tmp_path / "srn.jsonl"), "--out", str(tmp_path / "dual.jsonl")]) == 0
    assert (tmp_path / "dual.jsonl").read_bytes() == (out / "dual_srn.jsonl").read_bytes()
    assert main([
        "features", "--graph", str(tmp_path / "srn.jsonl"), "--manifest", str(data / "manifest.json"),
        "--vision", "--origin-graph", str(data / "graph.jsonl"), "--out", str(tmp_path / "f.jsonl"),
    ]) == 0
    assert (tmp_path / "f.jsonl").read_bytes() == (out / "features" / "srn_vis.jsonl").read_bytes()


def test_embed_writes_one_row_per_node(demo_run, tmp_path):
    _, cfg, out = demo_run
    emb = tmp_path / "z.jsonl"
    assert main(["embed", "--model", str(out / "models" / "unsupervised_srn_seed0.json"), "--config", str(cfg), "--out", str(emb)]) == 0
    lines = [json.loads(x) for x in emb.read_text().splitlines()]
    n_srn = len(load_graph(out / "srn.jsonl").edges)
    assert lines[0]["kind"] == "header" and lines[0]["dim"] == 32
    assert all(len(r["embedding"]) == 32 for r in lines[1:])
    assert len(lines) - 1 == n_srn


def test_unknown_subcommand_exit_1():
    proc = subprocess.run([sys.executable, "-m", "roadsage", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr


def test_bad_config_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "seeds": "zero"})
    assert main(["pipeline", "--config", str(cfg)]) == 1
    cfg = write_config(tmp_path, {**SMALL, "experiment": {**SMALL["experiment"], "variants": ["xrn"]}})
    assert main(["pipeline", "--config", str(cfg)]) == 1
    assert "config error" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert main(["segment", "--in", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x.jsonl")]) == 2
    assert main(["evaluate", "--model", str(tmp_path / "nope.json"), "--graph", str(tmp_path / "g.jsonl")]) == 2
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    assert main(["dualize", "--in", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "d.jsonl")]) == 2
    assert "data error" in capsys.readouterr().err


def test_divergent_training_exit_3(tmp_path, capsys):
    cfg = {**SMALL, "experiment": {"variants": ["orn"], "modes": ["supervised"], "supervised": {"epochs": 5, "learning_rate": 1e200}}}
    with pytest.warns(RuntimeWarning):
        assert main(["pipeline", "--config", str(write_config(tmp_path, cfg))]) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_synth_subcommand(tmp_path):
    cfg = write_config(tmp_path, {"grid_rows": 2, "grid_cols": 3})
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "city"), "--seed", "4"]) == 0
    assert {p.name for p in (tmp_path / "city").iterdir()} >= {"graph.jsonl", "manifest.json", "synth_config.json"}
    assert json.loads((tmp_path / "city" / "synth_config.json").read_text())["seed"] == 4
