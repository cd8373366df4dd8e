import json

import numpy as np
import pytest

from armsearch import checkpoint as ck
from armsearch.arm import UsageError
from armsearch.cli import main
from armsearch.config import RunConfig, build_config, load_config, parse_pairs
from armsearch.train import build_model, initial_loss, train_model
from armsearch.synth import make_splits

TINY = """# tiny run for tests
synth.scenes_train=6
synth.scenes_test=6
synth.num_identities=8
arm.channels_in=8
arm.roi_size=4
model.embed_dim=16
model.backbone_widths=4,8
epochs=2
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def records(out, command):
    return [json.loads(line) for line in (out / f"{command}.jsonl").read_text().splitlines()]


def without(rec, *keys):
    return {k: v for k, v in rec.items() if k not in keys}


# -- config ---------------------------------------------------------------------

class TestConfig:
    def test_text_round_trip(self):
        c = build_config(parse_pairs(TINY.splitlines()))
        again = build_config(parse_pairs(c.to_text().splitlines()))
        assert again == c and again.hash() == c.hash()

    def test_defaults_round_trip(self):
        c = RunConfig()
        assert build_config(parse_pairs(c.to_text().splitlines())) == c

    def test_overrides_win(self, cfg):
        c = load_config(cfg, ["epochs=5", "arm.roi_size=6"])
        assert c.epochs == 5 and c.arm.roi_size == 6 and c.arm.tokens == 36
        assert c.arm.token_mlp_hidden == 72

    def test_hash_ignores_out(self):
        a, b = build_config([("out", "x")]), build_config([("out", "y")])
        assert a.hash() == b.hash() and a.hash() != build_config([("epochs", "3")]).hash()

    @pytest.mark.parametrize("pair", [("nope", "1"), ("arm.nope", "1"), ("epochs", "x"), ("epochs", "-1"),
                                      ("variant", "fancy"), ("synth.occlusion_prob", "2")])
    def test_rejects(self, pair):
        with pytest.raises(UsageError):
            build_config([pair])

    def test_missing_equals(self):
        with pytest.raises(UsageError, match=":2:"):
            parse_pairs(["a=1", "oops"])

    def test_with_seed_moves_data_seed(self):
        c = RunConfig().with_seed(4)
        assert c.seed == 4 and c.synth.seed == 4


# -- exit codes -----------------------------------------------------------------

class TestExitCodes:
    def test_unknown_command(self, tmp_path):
        assert main(["fly", "--out", str(tmp_path)]) == 1

    def test_bad_key(self, cfg, tmp_path, capsys):
        assert main(["train", "--config", cfg, "--set", "bogus=1", "--out", str(tmp_path)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_negative_epochs(self, cfg, tmp_path):
        assert main(["train", "--config", cfg, "--set", "epochs=-1", "--out", str(tmp_path)]) == 1

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 1

    def test_bad_thread_count(self, cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("ARM_SEARCH_THREADS", "0")
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint(self, cfg, tmp_path):
        assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 1

    def test_corrupt_checkpoint(self, cfg, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--set", "epochs=0", "--out", str(out)]) == 0
        data = bytearray((out / "model.ckpt").read_bytes())
        data[len(data) // 2] ^= 0x40
        (out / "model.ckpt").write_bytes(bytes(data))
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 2
        assert "corrupt checkpoint" in capsys.readouterr().err

    def test_checkpoint_shape_mismatch(self, cfg, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--set", "epochs=0", "--out", str(out)]) == 0
        assert main(["eval", "--config", cfg, "--set", "model.embed_dim=8", "--out", str(out)]) == 1
        assert "shape mismatch for reid.nae.embed.weight" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, cfg, tmp_path, capsys):
        code = main(["train", "--config", cfg, "--set", "sgd.learning_rate=1e12", "--set", "epochs=3",
                     "--out", str(tmp_path)])
        assert code == 2
        assert "non-finite" in capsys.readouterr().err


# -- train / eval -----------------------------------------------------------------

def test_zero_epochs_writes_initial_checkpoint(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--set", "epochs=0", "--out", str(tmp_path)]) == 0
    assert not list(tmp_path.glob("epoch_*.ckpt")) and not (tmp_path / "train_loss.png").exists()
    (rec,) = records(tmp_path, "train")
    assert rec["event"] == "checkpoint" and rec["epoch"] == 0
    c = load_config(cfg, ["epochs=0"])
    fresh = build_model(c.model_config(), 8, 0)
    assert rec["checksum"] == ck.save(tmp_path / "again.ckpt", fresh, c.to_text())


def test_train_outputs_and_fields(cfg, tmp_path, capsys):
    assert main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert sorted(p.name for p in tmp_path.glob("epoch_*.ckpt")) == ["epoch_01.ckpt", "epoch_02.ckpt"]
    recs = records(tmp_path, "train")
    assert [r["event"] for r in recs] == ["epoch", "epoch", "done"]
    c = load_config(cfg).with_seed(3)
    for r in recs:
        assert r["command"] == "train" and r["seed"] == 3 and r["config_hash"] == c.hash()
        assert r["version"].startswith("v0.1.0-")
    assert set(recs[0]["losses"]) == {"det_cls", "det_reg", "reid_cls", "reid_reg", "reid_oim"}
    assert recs[-1]["checksum"] == recs[1]["checksum"]
    stdout = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert stdout == recs
    assert ck.load(tmp_path / "model.ckpt").config_text == c.to_text()


def test_train_eval_is_bitwise_reproducible(cfg, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    a, b = outs
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    assert (a / "detections.txt").read_bytes() == (b / "detections.txt").read_bytes()
    strip = ("checkpoint", "path", "seconds")
    assert [without(r, *strip) for r in records(a, "train")] == [without(r, *strip) for r in records(b, "train")]
    assert [without(r, *strip) for r in records(a, "eval")] == [without(r, *strip) for r in records(b, "eval")]


def test_eval_is_pure(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    before = (tmp_path / "model.ckpt").read_bytes()
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    first = records(tmp_path, "eval")
    dets = (tmp_path / "detections.txt").read_text()
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert records(tmp_path, "eval") == first
    assert (tmp_path / "detections.txt").read_text() == dets
    assert (tmp_path / "model.ckpt").read_bytes() == before
    report = first[0]
    assert report["event"] == "report" and 0 <= report["map"] <= 1
    assert first[-1]["gallery_size"] == report["gallery_size"]


def test_detection_dump_format(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--set", "epochs=1", "--out", str(tmp_path)]) == 0
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "detections.txt").read_text().splitlines()
    for line in lines:
        sid, x1, y1, x2, y2, score, emb = line.split(" ")
        assert int(sid) >= 6
        assert float(x1) < float(x2) and float(y1) < float(y2) and 0.5 <= float(score) <= 1
        e = np.array([float(v) for v in emb.split(",")])
        assert e.shape == (16,) and abs(np.linalg.norm(e) - 1) < 1e-4


def test_ablate_singleton_matches_train_eval(cfg, tmp_path):
    ab, te = tmp_path / "ablate", tmp_path / "te"
    assert main(["ablate", "--config", cfg, "--set", "variants=baseline", "--out", str(ab)]) == 0
    assert main(["train", "--config", cfg, "--set", "variant=baseline", "--out", str(te)]) == 0
    assert main(["eval", "--config", cfg, "--set", "variant=baseline", "--out", str(te)]) == 0
    rows = [r for r in records(ab, "ablate") if r["event"] == "row"]
    (prov,) = [r for r in records(ab, "ablate") if r["event"] == "provenance"]
    report = records(te, "eval")[0]
    assert len(rows) == 1
    assert without(rows[0], "command", "config_hash", "event", "variant", "data_seed", "data_checksum",
                   "final_loss", "seconds") == without(report, "command", "config_hash", "event", "checkpoint")
    assert rows[0]["final_loss"] == records(te, "train")[-2]["loss"]
    assert prov["data_checksum"] == rows[0]["data_checksum"]
    assert (ab / "ablation.tsv").read_text().count("\n") == 2
    assert (ab / "ablation.png").exists()


def test_ablate_shares_data_across_variants(cfg, tmp_path):
    assert main(["ablate", "--config", cfg, "--set", "variants=baseline,sca_only", "--set", "repeats=2",
                 "--set", "epochs=1", "--out", str(tmp_path)]) == 0
    recs = records(tmp_path, "ablate")
    rows = [r for r in recs if r["event"] == "row"]
    assert [(r["variant"], r["data_seed"]) for r in rows] == [("baseline", 0), ("sca_only", 0),
                                                            ("baseline", 1), ("sca_only", 1)]
    assert rows[0]["data_checksum"] == rows[1]["data_checksum"] != rows[2]["data_checksum"]
    summaries = [r for r in recs if r["event"] == "summary"]
    assert [s["runs"] for s in summaries] == [2, 2]
    assert abs(summaries[0]["map"] - (rows[0]["map"] + rows[2]["map"]) / 2) < 1e-12


def test_loss_decreases():
    c = build_config(parse_pairs(TINY.splitlines()) + [("synth.scenes_train", "12")])
    for seed in range(3):
        run = c.with_seed(seed)
        scenes = make_splits(run.synth).train
        model = build_model(run.model_config(), run.synth.num_identities, seed)
        start = initial_loss(model, scenes, run.batch_size, seed)
        history = train_model(model, scenes, run.sgd, 4, run.batch_size, seed)
        assert history[-1].total < start


# -- gradcheck / bench ------------------------------------------------------------

def test_gradcheck_ops(tmp_path):
    assert main(["gradcheck", "--scope", "ops", "--seeds", "1", "--out", str(tmp_path)]) == 0
    recs = records(tmp_path, "gradcheck")
    cases = [r for r in recs if r["event"] == "case"]
    assert cases and all(r["passed"] and r["max_relative_error"] <= 1e-6 for r in cases)
    (control,) = [r for r in recs if r["event"] == "negative_control"]
    assert control["detected"] and not control["passed"]
    assert recs[-1]["event"] == "done" and recs[-1]["passed"]


def test_gradcheck_bad_seeds(tmp_path):
    assert main(["gradcheck", "--scope", "ops", "--seeds", "0", "--out", str(tmp_path)]) == 1


def bench(tmp_path, variant, name):
    out = tmp_path / name
    assert main(["bench", "--set", f"variant={variant}", "--out", str(out)]) == 0
    (rec,) = records(out, "bench")
    return rec


def test_bench(tmp_path):
    a = bench(tmp_path, "full_arm", "a")
    b = bench(tmp_path, "full_arm", "b")
    base = bench(tmp_path, "baseline", "c")
    assert a["rois_per_arm_forward"] == 16 and a["repeats"] >= 5
    for key in ("ms_per_arm_forward", "ms_per_search_batch"):
        assert abs(a[key] - b[key]) <= 0.25 * max(a[key], b[key])
    assert base["ms_per_arm_forward"] < 0.1 * a["ms_per_arm_forward"]
    assert base["scenes_per_second"] > a["scenes_per_second"]


def test_bench_uses_checkpoint(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--set", "epochs=0", "--out", str(tmp_path)]) == 0
    assert main(["bench", "--config", cfg, "--checkpoint", str(tmp_path / "model.ckpt"),
                 "--out", str(tmp_path)]) == 0
    assert main(["bench", "--config", cfg, "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--out", str(tmp_path)]) == 1
