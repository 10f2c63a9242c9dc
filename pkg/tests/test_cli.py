import csv
import json
import time

import numpy as np
import pytest

from htl.cli import main
from htl.data import LabeledDataset, load_dataset, write_dataset
from htl.evaluate import recall_at_k
from htl.hierarchy import parse_tree
from htl.model import MlpEmbedder, load_checkpoint, save_checkpoint
from htl.trainer import embed_dataset

SMALL = ["--num-superclasses", "2", "--subclasses-per-super", "3", "--samples-per-class", "10", "--input-dim", "6"]
TRAIN_FLAGS = ["--embedding-dim", "4", "--hidden-dims", "16", "--lr", "0.1", "--epochs", "3",
               "--m", "2", "--t", "3", "--eval-every", "2", "--ks", "1,2"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data.csv"
    assert main(["generate", "--out", str(out), *SMALL, "--holdout-per-class", "3"]) == 0
    return out


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(MlpEmbedder.initialize([6, 32, 4], seed=3), path)
    return path


def test_generate_writes_files(data):
    assert len(data.read_text().splitlines()) == 60
    assert len(data.with_suffix(".train.csv").read_text().splitlines()) == 42
    assert len(data.with_suffix(".test.csv").read_text().splitlines()) == 18
    meta = json.loads(data.with_name("data.csv.meta.json").read_text())
    assert meta["num_samples"] == 60 and meta["spec"]["input_dim"] == 6


def test_generate_same_seed_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["generate", "--out", str(a), *SMALL, "--seed", "5"]) == 0
    assert main(["generate", "--out", str(b), *SMALL, "--seed", "5"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_invalid_spec_writes_nothing(tmp_path, capsys):
    out = tmp_path / "bad" / "x.csv"
    assert main(["generate", "--out", str(out), "--noise-scale", "5.0"]) != 0
    assert "htl: error:" in capsys.readouterr().err
    assert not (tmp_path / "bad").exists()


def test_train_smoke_and_rerun_identical(data, tmp_path):
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        start = time.perf_counter()
        rc = main(["train", "--train-data", str(data.with_suffix(".train.csv")),
                   "--eval-data", str(data.with_suffix(".test.csv")), "--out-dir", str(out), *TRAIN_FLAGS])
        assert rc == 0
        assert time.perf_counter() - start < 10
        assert (out / "checkpoints" / "final.ckpt").exists()
        assert (out / "config.resolved.json").exists()
        rows = read_rows(out / "metrics.csv")
        assert rows[0] == ["iteration", "epoch", "loss", "active_fraction", "recall@1", "recall@2", "seconds"]
        runs.append([r[:-1] for r in rows])
    assert runs[0] == runs[1]


def test_train_config_file_and_flag_override(data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train_data": str(data), "out_dir": str(tmp_path / "o"), "epochs": 1,
                               "embedding_dim": 4, "hidden_dims": [16], "m": 2, "t": 3, "lr": 0.5}))
    assert main(["train", "--config", str(cfg), "--lr", "0.05"]) == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert resolved["lr"] == 0.05 and resolved["epochs"] == 1


def test_unknown_config_key_rejected(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train_data": str(data), "out_dir": str(tmp_path / "o"), "momentum": 0.9}))
    assert main(["train", "--config", str(cfg)]) != 0
    assert "momentum" in capsys.readouterr().err


def test_evaluate_matches_library(data, checkpoint, tmp_path):
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--query", str(data), "--ks", "1,4", "--out", str(out)]) == 0
    ds = load_dataset(data)
    E = embed_dataset(load_checkpoint(checkpoint), ds.features)
    expected = recall_at_k(E, ds.labels, E, ds.labels, [1, 4], self_match_excluded=True)
    rows = read_rows(out)[1:]
    assert [(int(k), float(r)) for k, r in rows] == list(zip(expected.ks, expected.recalls))
    sidecar = json.loads(out.with_name("eval.csv.config.json").read_text())
    assert sidecar["self_match_excluded"] is True


def test_evaluate_self_exclusion_on_duplicate_pairs(checkpoint, tmp_path, capsys):
    rng = np.random.default_rng(0)
    base = rng.normal(size=(10, 6))
    ds = LabeledDataset(np.repeat(base, 2, axis=0), np.repeat(np.arange(10), 2))
    path = tmp_path / "pairs.csv"
    write_dataset(ds, path)
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--query", str(path), "--ks", "1"]) == 0
    assert capsys.readouterr().out.splitlines()[1].split() == ["1", "1.0000"]
    # an explicit identical gallery also triggers self-exclusion
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--query", str(path),
                 "--gallery", str(path), "--ks", "1"]) == 0
    assert capsys.readouterr().out.splitlines()[1].split() == ["1", "1.0000"]


def test_evaluate_dimension_mismatch(checkpoint, tmp_path):
    path = tmp_path / "wide.csv"
    write_dataset(LabeledDataset(np.zeros((4, 9)), [0, 0, 1, 1]), path)
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--query", str(path)]) != 0


def test_tree_depth_one(data, checkpoint, tmp_path, capsys):
    out, stats_out = tmp_path / "tree.txt", tmp_path / "stats.csv"
    assert main(["tree", "--checkpoint", str(checkpoint), "--data", str(data), "--depth", "1",
                 "--out", str(out), "--stats-out", str(stats_out)]) == 0
    tree = parse_tree(out.read_text())
    assert len(tree.thresholds) == 2 and tree.thresholds[1] == 4.0
    assert out.read_text() == capsys.readouterr().out
    rows = read_rows(stats_out)
    assert rows[0][:3] == ["class", "count", "intra"] and len(rows) == 7


def test_tree_dump_round_trip(data, checkpoint, tmp_path):
    out = tmp_path / "tree.txt"
    assert main(["tree", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(out)]) == 0
    tree = parse_tree(out.read_text())
    assert tree.depth == 16
    assert np.all(np.diff(tree.node_counts) <= 0)
    assert tree.node_counts[-1] == 1


def compare(data, tmp_path, strategies):
    out = tmp_path / "cmp"
    rc = main(["compare", "--train-data", str(data.with_suffix(".train.csv")),
               "--eval-data", str(data.with_suffix(".test.csv")), "--out-dir", str(out),
               "--strategies", strategies, *TRAIN_FLAGS])
    return rc, out


def test_compare_two_strategies(data, tmp_path):
    rc, out = compare(data, tmp_path, "random+constant,anchor-neighbor+dynamic")
    assert rc == 0
    rows = read_rows(out / "compare.csv")
    assert rows[0] == ["iteration", "random+constant:recall@1", "anchor-neighbor+dynamic:recall@1"]
    assert len(list(out.glob("metrics_*.csv"))) == 2


def test_compare_duplicate_strategy_identical_curves(data, tmp_path):
    rc, out = compare(data, tmp_path, "anchor-neighbor+dynamic,anchor-neighbor+dynamic")
    assert rc == 0
    rows = read_rows(out / "compare.csv")
    assert rows[0][1].endswith("#0:recall@1") and rows[0][2].endswith("#1:recall@1")
    assert all(r[1] == r[2] for r in rows[1:])


@pytest.mark.parametrize("bad", ["random", "random+steep", "hard+dynamic+contrastive", "random+flat+triplet"])
def test_compare_rejects_bad_strategy(data, tmp_path, bad):
    rc, out = compare(data, tmp_path, bad)
    assert rc != 0


def test_compare_contrastive_and_mining_variants(data, tmp_path):
    rc, out = compare(data, tmp_path, "semi-hard+constant,random+flat,random+dynamic+contrastive")
    assert rc == 0
    assert len(read_rows(out / "compare.csv")[0]) == 4
