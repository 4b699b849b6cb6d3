import json

import pytest

from cadlab.cli import main
from cadlab.config import DEFAULTS, load_config, parse_override, sub_seed
from cadlab.errors import ConfigError
from cadlab.persistence import load_checkpoint

TINY = """
name = "tiny"
seed = 3

[data]
n_per_concept = 40

[handicap]
n = 20

[schedule]
T = 10

[model]
hidden = 16
emb = 8

[train]
epochs = 2
batch_size = 64

[mc]
n_samples = 32
pool_size = 8

[erase]
row_cap = 0.25

[report]
n_per_concept = 10
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_unknown_subcommand_exits_2(tiny):
    assert main(["frobnicate", str(tiny)]) == 2


def test_missing_seed_exits_2(tmp_path):
    path = tmp_path / "noseed.toml"
    path.write_text('name = "x"\n')
    assert main(["gen-data", str(path), "--out", str(tmp_path / "o")]) == 2


def test_missing_input_exits_2(tiny, tmp_path):
    assert main(["erase", str(tiny), "--out", str(tmp_path / "empty")]) == 2


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = 1\n[erase]\nratoi = 0.1\n")
    with pytest.raises(ConfigError, match="ratoi"):
        load_config(path)


def test_overrides_and_seed_flag(tiny):
    cfg = load_config(tiny, seed=9, overrides=["erase.ratio=0.002", "name=other", "sweep.ratios=[0.0, 0.1]"])
    assert cfg["seed"] == 9 and cfg["erase"]["ratio"] == 0.002 and cfg["name"] == "other"
    assert cfg["sweep"]["ratios"] == [0.0, 0.1]
    assert cfg["train"]["lr"] == DEFAULTS["train"]["lr"]
    assert parse_override("a.b=true") == (["a", "b"], True)
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_sub_seeds_differ_by_name():
    assert sub_seed(0, "train") != sub_seed(0, "init")
    assert sub_seed(0, "train") == sub_seed(0, "train")


def test_tiny_pipeline_and_ratio_zero_identity(tiny, tmp_path):
    out = tmp_path / "run"
    for cmd in ["gen-data", "train", "sample", "attribute"]:
        assert main([cmd, str(tiny), "--out", str(out)]) == 0
    assert main(["erase", str(tiny), "--out", str(out), "--override", "erase.ratio=0.0"]) == 0
    assert (out / "erased.ckpt").read_bytes() == (out / "base.ckpt").read_bytes()
    assert main(["erase", str(tiny), "--out", str(out)]) == 0
    report = json.loads((out / "erase.json").read_text())["report"]
    assert report["mask_size"] > 0
    assert load_checkpoint(out / "erased.ckpt").arch.hidden == 16
    assert main(["report", str(tiny), "--out", str(out)]) == 0
    assert "erase" in json.loads((out / "report.json").read_text())["summary"]


def test_rerun_is_byte_identical(tiny, tmp_path):
    out = tmp_path / "run"
    for cmd in ["gen-data", "train"]:
        assert main([cmd, str(tiny), "--out", str(out)]) == 0
    first = (out / "base.ckpt").read_bytes(), (out / "train.json").read_bytes()
    assert main(["train", str(tiny), "--out", str(out)]) == 0
    assert ((out / "base.ckpt").read_bytes(), (out / "train.json").read_bytes()) == first
