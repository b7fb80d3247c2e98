import csv
import json
import struct

import numpy as np
import pytest

from segada import config as C
from segada.checkpoint import read_records
from segada.cli import main
from segada.data import read_splits
from segada.evaluation import cross_domain_retrieval, retrieval_sets, run_retrieval
from segada.networks import feature_descriptor
from segada.trainer import load_checkpoint

SMALL = """
# tiny run for the command tests
data.seed = 1
data.n_source_train = 10
data.n_source_val = 4
data.n_target_train = 10
data.n_target_test = 4
data.n_third_test = 3
train.iterations = 4
train.eval_interval = 2
eval.pool_per_domain = 8
eval.queries_per_domain = 4
eval.k_list = 1, 4, 16
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert main(["gen-data", "--config", str(root / "small.cfg"), "--out", str(root / "data")]) == 0
    return root


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = C.loads(SMALL)
    assert cfg.train.iterations == 4 and cfg.eval.k_list == (1, 4, 16)
    assert C.loads(C.dumps(cfg)) == cfg
    assert C.loads("") == C.RunConfig()


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(C.ConfigError, match="train.alpah"):
        C.loads("train.alpah = 0.1")
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.loads("optim.lr = 1")
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.loads("train.iterations = many")
    with pytest.raises(C.ConfigError, match="non-negative"):
        C.loads("train.beta = -1")
    with pytest.raises(C.ConfigError, match="variant"):
        C.loads("train.variant = bogus")


def test_every_field_has_a_default():
    text = C.dumps(C.RunConfig())
    assert "train.lr_fc = 1e-05" in text and "train.lr_gd = 0.0002" in text
    assert "train.alpha = 0.1" in text and "model.g_dropout = 0.5" in text


# ---------------------------------------------------------------- gen-data


def test_gen_data_files_and_manifest(workdir):
    data = workdir / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert sorted(p.name for p in data.glob("*.sgds")) == sorted(
        f"{n}.sgds" for n in ("source_train", "source_val", "target_train", "target_test", "third_test"))
    for name, entry in manifest["splits"].items():
        raw = (data / entry["path"]).read_bytes()
        count = struct.unpack_from("<4sHI", raw)[2]
        assert count == entry["count"]
    assert (data / "config.txt").exists()


def test_gen_data_is_deterministic(workdir, tmp_path):
    assert main(["gen-data", "--config", str(workdir / "small.cfg"), "--out", str(tmp_path / "again")]) == 0
    for f in (workdir / "data").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes(), f.name


def test_gen_data_bad_config(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("data.colour = red\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x")]) == 1
    assert "data.colour" in capsys.readouterr().err


# ---------------------------------------------------------------- train / eval


@pytest.fixture(scope="module")
def trained(workdir):
    out = {}
    for variant in ("full", "source_only"):
        d = workdir / f"run_{variant}"
        assert main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                     "--out", str(d), "--variant", variant]) == 0
        out[variant] = d
    return out


def test_train_outputs(trained):
    d = trained["full"]
    metrics = rows(d / "metrics.csv")
    assert metrics[0] == ["iteration", "seg", "aux_s", "rec_s", "rec_t", "adv_D_s", "adv_D_t", "adv_G_s",
                          "adv_G_t", "adv_F_s", "adv_F_t", "D_total", "G_total", "F_total"]
    assert len(metrics) - 1 == 4
    ev = rows(d / "eval.csv")
    assert ev[0] == ["iteration", "source_val_miou", "target_test_miou"]
    assert [r[0] for r in ev[1:]] == ["2", "4"]
    assert (d / "ckpt_000002.sgda").exists() and (d / "final.sgda").exists()
    assert "train.variant = full" in (d / "config.txt").read_text()


def test_source_only_checkpoint_has_no_generator_or_discriminator(trained):
    names = read_records(trained["source_only"] / "final.sgda")
    assert not any(n.startswith(("G.", "D.")) for n in names)
    # empty fields for terms a baseline does not have
    assert rows(trained["source_only"] / "metrics.csv")[1][3] == ""


def test_train_is_repeatable_from_echoed_config(trained, workdir, tmp_path):
    d = trained["full"]
    assert main(["train", "--config", str(d / "config.txt"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "again")]) == 0
    for f in ("eval.csv", "metrics.csv", "final.sgda"):
        assert (d / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_train_missing_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_eval_output_parses_back(trained, workdir, tmp_path, capsys):
    out = tmp_path / "iou.csv"
    assert main(["eval", "--checkpoint", str(trained["full"] / "final.sgda"), "--data", str(workdir / "data"),
                 "--split", "third", "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "mIoU" in table and "ground" in table
    body = rows(out)
    assert body[0] == ["class", "iou"]
    per_class = [float(v) for _, v in body[1:-1] if v != ""]
    assert float(body[-1][1]) == pytest.approx(np.mean(per_class), abs=1e-15)


def test_eval_upsample_and_dimension_mismatch(trained, workdir, tmp_path, capsys):
    ck = str(trained["full"] / "final.sgda")
    assert main(["eval", "--checkpoint", ck, "--data", str(workdir / "data"), "--upsample", "2"]) == 0
    (tmp_path / "big.cfg").write_text("data.height = 32\ndata.width = 32\ndata.n_source_train = 1\n"
                                      "data.n_source_val = 1\ndata.n_target_train = 1\ndata.n_target_test = 1\n"
                                      "data.n_third_test = 1\n")
    main(["gen-data", "--config", str(tmp_path / "big.cfg"), "--out", str(tmp_path / "d32")])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "d32")]) == 1
    err = capsys.readouterr().err
    assert "64x64" in err and "32x32" in err


# ---------------------------------------------------------------- retrieve


def test_retrieve_same_checkpoint_gives_identical_columns(trained, workdir, tmp_path, capsys):
    ck = str(trained["full"] / "final.sgda")
    assert main(["retrieve", "--checkpoint-a", ck, "--checkpoint-b", ck, "--data", str(workdir / "data"),
                 "--config", str(workdir / "small.cfg"), "--out", str(tmp_path)]) == 0
    body = rows(tmp_path / "retrieval.csv")
    assert body[0] == ["k", "A_k_modelA", "A_k_modelB", "B_k_modelA", "B_k_modelB"]
    for k, a1, a2, b1, b2 in body[1:]:
        assert a1 == a2 and b1 == b2
    # the full pool holds 8 target items
    assert body[-1][0] == "16" and float(body[-1][1]) == 8.0
    assert "mAP" in (tmp_path / "retrieval_summary.txt").read_text()


def test_retrieve_matches_brute_force(trained, workdir):
    splits = read_splits(workdir / "data")
    state = load_checkpoint(trained["source_only"] / "final.sgda")
    sets = retrieval_sets(splits, 8, 4)
    res = run_retrieval(state.bundle, sets, [1, 3, 8, 16])
    pool_imgs, is_target, qs, qt, *_ = sets
    pool = [feature_descriptor(state.bundle, x) for x in pool_imgs]

    def count(q, want_target, k):
        qd = feature_descriptor(state.bundle, q).astype(np.float64)
        sims = [round(float(qd @ p / (np.linalg.norm(qd) * np.linalg.norm(p))), 12) for p in pool]
        order = sorted(range(16), key=lambda i: (-sims[i], i))
        return sum(is_target[i] == want_target for i in order[:k])

    for i, k in enumerate([1, 3, 8, 16]):
        assert res.a_k[i] == np.mean([count(q, True, k) for q in qs])
        assert res.b_k[i] == np.mean([count(q, False, k) for q in qt])


def test_retrieve_rejects_architecture_mismatch(trained, workdir, tmp_path, capsys):
    (tmp_path / "narrow.cfg").write_text(SMALL + "model.f_widths = 8, 8, 8\nmodel.c_width = 8\n")
    assert main(["train", "--config", str(tmp_path / "narrow.cfg"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "narrow"), "--variant", "source_only", "--iterations", "1"]) == 0
    capsys.readouterr()
    assert main(["retrieve", "--checkpoint-a", str(trained["full"] / "final.sgda"),
                 "--checkpoint-b", str(tmp_path / "narrow" / "final.sgda"), "--data", str(workdir / "data"),
                 "--config", str(workdir / "small.cfg")]) == 1
    assert "architecture mismatch" in capsys.readouterr().err


def test_retrieval_overlap_is_rejected():
    pool = np.eye(4)
    with pytest.raises(ValueError, match="overlap"):
        cross_domain_retrieval(pool, [0, 0, 1, 1], pool[:1], pool[2:3], [1], [10, 11, 12, 13], [11], [20])


# ---------------------------------------------------------------- ablate


def test_ablate_rows_in_order(trained, workdir, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                 "--out", str(out)]) == 0
    body = rows(out / "ablation.csv")
    assert body[0] == ["variant", "source_val_miou", "target_test_miou", "third_test_miou", "checkpoint"]
    assert [r[0] for r in body[1:]] == ["source_only", "feature_space_d", "no_patch", "no_aux", "full"]
    # the full row equals a stand-alone train run with the same seed
    assert (out / "full" / "final.sgda").read_bytes() == (trained["full"] / "final.sgda").read_bytes()
    full_eval = rows(trained["full"] / "eval.csv")[-1]
    assert body[-1][2] == full_eval[2]


def test_threads_env_is_honoured(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("SEGADA_THREADS", "1")
    assert main(["gen-data", "--config", str(workdir / "small.cfg"), "--out", str(tmp_path / "t")]) == 0
