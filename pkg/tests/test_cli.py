import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from convmvm.cli import main
from convmvm.config import default_config, parse_config, render_config
from convmvm.dataio import read_frame
from convmvm.model import DecoderConfig, EncoderConfig, patchify
from convmvm.trainer import TrainConfig

TINY_TRAIN = TrainConfig(
    epochs=2,
    warmup_epochs=1,
    batch_size=2,
    pairs_per_epoch=2,
    image_size=16,
    seed=5,
    augment="none",
    checkpoint_every=1,
)
TINY_ENC = EncoderConfig(stem_factor=4, stage_depths=(1, 1), stage_widths=(4, 8))
TINY_DEC = DecoderConfig(depth=1, width=8, patch_size=8)
TINY_TEXT = render_config(TINY_TRAIN, TINY_ENC, TINY_DEC)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--seed", "3", "--sequences", "3", "--frames", "3", "--size", "16", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    cfg = tmp_path_factory.mktemp("cli") / "cfg.txt"
    cfg.write_text(TINY_TEXT)
    assert main(["pretrain", "--config", str(cfg), "--data", str(data_dir), "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_creates_sequence_directories(self, data_dir):
        assert len([p for p in data_dir.iterdir() if p.is_dir()]) == 3

    def test_same_seed_byte_identical_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-data", "--seed", "9", "--sequences", "2", "--frames", "2", "--size", "16", "--out", str(out)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_indivisible_size_exits_2(self, tmp_path):
        assert main(["gen-data", "--seed", "1", "--sequences", "1", "--frames", "2", "--size", "30", "--out", str(tmp_path / "x")]) == 2

    def test_out_collision_refused_without_force(self, tmp_path):
        out = tmp_path / "d"
        args = ["gen-data", "--seed", "1", "--sequences", "1", "--frames", "2", "--size", "16", "--out", str(out)]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--force"]) == 0


class TestPretrain:
    def test_missing_config_key_exits_2_naming_it(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("\n".join(l for l in TINY_TEXT.splitlines() if not l.startswith("mask_ratio")) + "\n")
        rc = main(["pretrain", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "mask_ratio" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, data_dir):
        cfg = tmp_path / "bad.txt"
        cfg.write_text(TINY_TEXT + "unknown_flag=1\n")
        assert main(["pretrain", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "o")]) == 2

    def test_missing_data_exits_3(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(TINY_TEXT)
        assert main(["pretrain", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3

    def test_outputs_and_manifest(self, trained):
        assert (trained / "loss.csv").is_file()
        assert (trained / "ckpt_final.vmc").is_file()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["config"] == TINY_TEXT
        assert len(manifest["config_hash"]) == 40
        rows = (trained / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,l_online,l_target,l_consistency,l_total,lr"
        assert len(rows) == 1 + TINY_TRAIN.total_steps

    def test_resume_reproduces_csv_tail(self, tmp_path, data_dir, trained):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(TINY_TEXT)
        out2 = tmp_path / "resumed"
        rc = main([
            "pretrain", "--config", str(cfg), "--data", str(data_dir), "--out", str(out2),
            "--resume", str(trained / "ckpt_step000001.vmc"),
        ])
        assert rc == 0
        full = (trained / "loss.csv").read_text().splitlines()
        resumed = (out2 / "loss.csv").read_text().splitlines()
        assert resumed[1:] == full[2:]


class TestEval:
    def test_random_init_runs(self, tmp_path, data_dir):
        out = tmp_path / "res.jsonl"
        assert main(["eval", "--random-init", "--data", str(data_dir), "--out", str(out)]) == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 3 + 1  # one per sequence plus summary
        assert lines[-1]["summary"] is True

    def test_requires_exactly_one_source(self, tmp_path, data_dir, trained):
        out = tmp_path / "r.jsonl"
        assert main(["eval", "--data", str(data_dir), "--out", str(out)]) == 2
        assert main([
            "eval", "--ckpt", str(trained / "ckpt_final.vmc"), "--random-init",
            "--data", str(data_dir), "--out", str(out),
        ]) == 2

    def test_checkpoint_eval_deterministic(self, tmp_path, data_dir, trained):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            rc = main(["eval", "--ckpt", str(trained / "ckpt_final.vmc"), "--data", str(data_dir), "--out", str(out)])
            assert rc == 0
        assert a.read_bytes() == b.read_bytes()

    def test_out_collision_refused(self, tmp_path, data_dir):
        out = tmp_path / "r.jsonl"
        assert main(["eval", "--random-init", "--data", str(data_dir), "--out", str(out)]) == 0
        assert main(["eval", "--random-init", "--data", str(data_dir), "--out", str(out)]) == 2


class TestReconstruct:
    def frames(self, data_dir):
        seq = sorted(p for p in data_dir.iterdir() if p.is_dir())[0]
        ppms = sorted(seq.glob("*.ppm"))
        return str(ppms[0]), str(ppms[1])

    def test_ratio_zero_copies_input_bitwise(self, tmp_path, data_dir, trained):
        f1, f2 = self.frames(data_dir)
        out = tmp_path / "rec0"
        rc = main(["reconstruct", "--ckpt", str(trained / "ckpt_final.vmc"), "--pair", f1, f2,
                   "--ratio", "0", "--seed", "1", "--out", str(out)])
        assert rc == 0
        assert (out / "frame1_recon.ppm").read_bytes() == Path(f1).read_bytes()
        assert (out / "frame2_recon.ppm").read_bytes() == Path(f2).read_bytes()

    def test_ratio_point_six_replaces_floor_count(self, tmp_path, data_dir, trained):
        f1, f2 = self.frames(data_dir)
        out = tmp_path / "rec6"
        rc = main(["reconstruct", "--ckpt", str(trained / "ckpt_final.vmc"), "--pair", f1, f2,
                   "--ratio", "0.6", "--seed", "1", "--out", str(out)])
        assert rc == 0
        # 16x16 frame, patch 8 -> 4 patches; floor(0.6*4) = 2 replaced.
        orig = patchify(read_frame(f1).data[None], 8)
        recon = patchify(read_frame(out / "frame1_recon.ppm").data[None], 8)
        differing = int((np.abs(orig - recon).max(axis=2) > 1e-9).sum())
        assert differing == 2

    def test_fixed_seed_identical_outputs(self, tmp_path, data_dir, trained):
        f1, f2 = self.frames(data_dir)
        outs = []
        for name in ("x", "y"):
            out = tmp_path / name
            rc = main(["reconstruct", "--ckpt", str(trained / "ckpt_final.vmc"), "--pair", f1, f2,
                       "--ratio", "0.5", "--seed", "7", "--out", str(out)])
            assert rc == 0
            outs.append(tree_digest(out))
        assert outs[0] == outs[1]

    def test_ratio_one_exits_2(self, tmp_path, data_dir, trained):
        f1, f2 = self.frames(data_dir)
        rc = main(["reconstruct", "--ckpt", str(trained / "ckpt_final.vmc"), "--pair", f1, f2,
                   "--ratio", "1.0", "--seed", "1", "--out", str(tmp_path / "z")])
        assert rc == 2


class TestConfigSurface:
    def test_default_config_round_trip(self):
        rc = default_config()
        again = parse_config(rc.text)
        assert again.train == rc.train
        assert again.encoder == rc.encoder
        assert again.decoder == rc.decoder
