import json
import subprocess
import sys

import pytest
import torch
from click.testing import CliRunner

from helpers import texture_corpus
from omlcodec import data as imgio
from omlcodec.bitstream import bpp
from omlcodec.checkpoint import load_base, save_base
from omlcodec.cli import main
from omlcodec.codec_core import CodecConfig, TrainConfig, train_base
from omlcodec.metrics import CSV_COLUMNS

GAMMA_FLAG = "100,1000,10000,100000,1000000,10000000"


def run_cli(args, env=None):
    runner = CliRunner()
    return runner.invoke(main, args, env=env, catch_exceptions=False)


def stats_of(result):
    for line in result.output.splitlines():
        if line.startswith("STATS "):
            return json.loads(line[len("STATS "):])
    raise AssertionError(f"no stats line in output: {result.output}")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("train_data")
    for i, img in enumerate(texture_corpus(10, 96, 77)):
        imgio.save_image(img, d / f"img{i:02d}.png")
    return d


@pytest.fixture(scope="module")
def tiny_base_dirs(tmp_path_factory, data_dir):
    torch.set_num_threads(2)
    out = tmp_path_factory.mktemp("bases")
    cfg = CodecConfig(hidden_channels=16, latent_channels=8, kernel_size=3)
    images = imgio.load_image_dir(data_dir)
    dirs = []
    for j, lam in enumerate([8.0, 256.0]):
        base = train_base(images, lam, TrainConfig(steps=120, batch_size=4, crop=64, lr=1e-3, seed=j), cfg)
        d = out / f"base{j}"
        save_base(d, base)
        dirs.append(d)
    return dirs


class TestTrainBaseCmd:
    def test_missing_data_is_usage_error(self, tmp_path):
        result = run_cli(["train-base", "--out", str(tmp_path / "ckpt")])
        assert result.exit_code == 2
        assert "--data" in result.output

    def test_run_writes_manifest_with_lambda(self, tmp_path, data_dir):
        out = tmp_path / "ckpt"
        result = run_cli([
            "train-base", "--data", str(data_dir), "--out", str(out),
            "--lambda", "8.0", "--steps", "25", "--seed", "3",
        ])
        assert result.exit_code == 0, result.output
        base = load_base(out)
        assert base.lam == 8.0

    def test_seeded_runs_have_identical_checksums(self, tmp_path, data_dir):
        sums = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = run_cli([
                "train-base", "--data", str(data_dir), "--out", str(out),
                "--lambda", "8.0", "--steps", "20", "--seed", "7",
            ])
            assert result.exit_code == 0, result.output
            manifest = json.loads((out / "manifest.json").read_text())
            sums.append(manifest["checksum"])
        assert sums[0] == sums[1]

    def test_env_seed_override(self, tmp_path, data_dir):
        out_env = tmp_path / "env"
        result = run_cli(
            ["train-base", "--data", str(data_dir), "--out", str(out_env),
             "--lambda", "8.0", "--steps", "20", "--seed", "0"],
            env={"OMLC_SEED": "7"},
        )
        assert result.exit_code == 0, result.output
        out_ref = tmp_path / "ref"
        run_cli(["train-base", "--data", str(data_dir), "--out", str(out_ref),
                 "--lambda", "8.0", "--steps", "20", "--seed", "7"])
        a = json.loads((out_env / "manifest.json").read_text())["checksum"]
        b = json.loads((out_ref / "manifest.json").read_text())["checksum"]
        assert a == b


class TestMetaTrainCmd:
    def test_lambda_count_mismatch(self, tmp_path, tiny_base_dirs, data_dir):
        result = run_cli([
            "meta-train", "--bases", ",".join(map(str, tiny_base_dirs)),
            "--lambdas", "1.0,2.0,3.0", "--data", str(data_dir),
            "--out", str(tmp_path / "meta"),
        ])
        assert result.exit_code == 2
        assert "lambdas" in result.output

    def test_writes_meta_manifest_with_grid(self, tmp_path, tiny_base_dirs, data_dir):
        out = tmp_path / "meta"
        result = run_cli([
            "meta-train", "--bases", ",".join(map(str, tiny_base_dirs)),
            "--data", str(data_dir), "--out", str(out), "--iters", "5",
        ])
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["meta"] is True
        assert manifest["lambdas"] == [8.0, 256.0]

    def test_alpha_zero_joint_path(self, tmp_path, tiny_base_dirs, data_dir):
        result = run_cli([
            "meta-train", "--bases", ",".join(map(str, tiny_base_dirs)),
            "--data", str(data_dir), "--out", str(tmp_path / "meta"),
            "--iters", "3", "--alpha", "0",
        ])
        assert result.exit_code == 0, result.output


@pytest.fixture(scope="module")
def encoded(tmp_path_factory, tiny_meta_dir):
    """One encoded image shared by encode/decode CLI tests."""
    d = tmp_path_factory.mktemp("enc")
    img_path = d / "input.png"
    imgio.save_image(texture_corpus(1, 96, 123)[0], img_path)
    out = d / "input.omlc"
    recon = d / "recon.png"
    stats_json = d / "stats.json"
    result = run_cli([
        "encode", str(img_path), "--model", str(tiny_meta_dir), "--out", str(out),
        "--oml-iters", "2", "--patch-size", "64", "--gamma-grid", GAMMA_FLAG,
        "--dump-recon", str(recon), "--stats-json", str(stats_json),
    ])
    assert result.exit_code == 0, result.output
    return {"dir": d, "img": img_path, "container": out, "recon": recon,
            "stats": json.loads(stats_json.read_text()), "result": result}


class TestEncodeCmd:
    def test_stats_line_matches_container_bpp(self, encoded):
        stats = stats_of(encoded["result"])
        breakdown = bpp(encoded["container"].read_bytes(), 96, 96)
        assert stats["bpp"] == breakdown.total
        assert abs(stats["bpp"] - 8 * len(encoded["container"].read_bytes()) / (96 * 96)) < 1e-9

    def test_zero_iters_adapted_equals_initial(self, tiny_meta_dir, encoded):
        out = encoded["dir"] / "zero.omlc"
        result = run_cli([
            "encode", str(encoded["img"]), "--model", str(tiny_meta_dir),
            "--out", str(out), "--oml-iters", "0", "--patch-size", "64",
        ])
        stats = stats_of(result)
        assert stats["best_distortion"] == stats["initial_distortion"]

    def test_payload_bytes_identical_across_iters(self, tiny_meta_dir, encoded):
        from omlcodec.bitstream import read_container

        out = encoded["dir"] / "zero2.omlc"
        run_cli(["encode", str(encoded["img"]), "--model", str(tiny_meta_dir),
                 "--out", str(out), "--oml-iters", "0", "--patch-size", "64"])
        a = [p.payload for p in read_container(out.read_bytes()).patches]
        b = [p.payload for p in read_container(encoded["container"].read_bytes()).patches]
        assert a == b

    def test_msssim_metric_runs(self, tiny_meta_dir, encoded):
        out = encoded["dir"] / "ms.omlc"
        result = run_cli([
            "encode", str(encoded["img"]), "--model", str(tiny_meta_dir),
            "--out", str(out), "--oml-iters", "1", "--metric", "msssim",
            "--patch-size", "96", "--gamma-grid", GAMMA_FLAG,
        ])
        assert result.exit_code == 0, result.output


class TestDecodeCmd:
    def test_decode_matches_dumped_reconstruction(self, tiny_meta_dir, encoded, tmp_path):
        out = tmp_path / "decoded.png"
        result = run_cli(["decode", str(encoded["container"]), "--model", str(tiny_meta_dir),
                          "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert out.read_bytes() == encoded["recon"].read_bytes()

    def test_decode_deterministic(self, tiny_meta_dir, encoded, tmp_path):
        outs = []
        for name in ("a.png", "b.png"):
            out = tmp_path / name
            run_cli(["decode", str(encoded["container"]), "--model", str(tiny_meta_dir),
                     "--out", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_wrong_model_checksum_exit_4(self, encoded, tiny_base_dirs, tmp_path, data_dir):
        # build a second, different meta model
        out_model = tmp_path / "other_meta"
        run_cli(["meta-train", "--bases", ",".join(map(str, tiny_base_dirs)),
                 "--data", str(data_dir), "--out", str(out_model), "--iters", "2"])
        result = run_cli(["decode", str(encoded["container"]), "--model", str(out_model),
                          "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 4
        assert "checksum" in result.output.lower()

    def test_garbage_container_exit_4(self, tiny_meta_dir, tmp_path):
        bad = tmp_path / "bad.omlc"
        bad.write_bytes(b"JUNKJUNKJUNK")
        result = run_cli(["decode", str(bad), "--model", str(tiny_meta_dir),
                          "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 4


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, data_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"stepz": 10}}))
        result = run_cli(["train-base", "--config", str(cfg), "--data", str(data_dir),
                          "--out", str(tmp_path / "ckpt")])
        assert result.exit_code == 2
        assert "stepz" in result.output

    def test_defaults_materialized(self):
        from omlcodec.config import load_config

        cfg = load_config(None)
        assert cfg["oml"]["gamma_grid"] == [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]
        assert cfg["lambdas"] == [0.0018, 0.0035, 0.0067, 0.013]

    def test_partial_override_keeps_defaults(self, tmp_path):
        from omlcodec.config import load_config

        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"steps": 7}}))
        cfg = load_config(path)
        assert cfg["train"]["steps"] == 7
        assert cfg["train"]["batch_size"] == 8


class TestEvalCmd:
    def test_empty_dir_is_io_error(self, tiny_meta_dir, tmp_path):
        for d in ("orig", "recon", "cont"):
            (tmp_path / d).mkdir()
        result = run_cli([
            "eval", "--orig", str(tmp_path / "orig"), "--recon", str(tmp_path / "recon"),
            "--containers", str(tmp_path / "cont"), "--model", str(tiny_meta_dir),
            "--out", str(tmp_path / "rd.csv"),
        ])
        assert result.exit_code == 3

    def test_eval_and_rd_report(self, tiny_meta_dir, encoded, tmp_path):
        orig_d, recon_d, cont_d, stats_d = [tmp_path / n for n in ("orig", "recon", "cont", "stats")]
        for d in (orig_d, recon_d, cont_d, stats_d):
            d.mkdir()
        stem = "sample"
        (orig_d / f"{stem}.png").write_bytes(encoded["img"].read_bytes())
        (recon_d / f"{stem}.png").write_bytes(encoded["recon"].read_bytes())
        (cont_d / f"{stem}.omlc").write_bytes(encoded["container"].read_bytes())
        (stats_d / f"{stem}.json").write_text(json.dumps(encoded["stats"]))
        csv_path = tmp_path / "rd.csv"
        points_path = tmp_path / "points.json"
        result = run_cli([
            "eval", "--orig", str(orig_d), "--recon", str(recon_d),
            "--containers", str(cont_d), "--model", str(tiny_meta_dir),
            "--stats", str(stats_d), "--out", str(csv_path),
            "--points-json", str(points_path),
        ])
        assert result.exit_code == 0, result.output
        lines = csv_path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 2
        row = dict(zip(CSV_COLUMNS, lines[1].split(",")))
        assert float(row["bpp"]) == pytest.approx(encoded["stats"]["bpp"], rel=1e-5)
        assert int(row["oml_iters"]) == 2

        csv2 = tmp_path / "rd2.csv"
        result = run_cli(["rd-report", "--points", str(points_path), "--out", str(csv2)])
        assert result.exit_code == 0, result.output
        assert csv2.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)


class TestImageIO:
    def test_png_roundtrip_exact_for_8bit_values(self, tmp_path):
        arr = (torch.arange(3 * 16 * 16).reshape(3, 16, 16) % 256).float() / 255.0
        path = tmp_path / "x.png"
        imgio.save_image(arr, path)
        back = imgio.load_image(path)
        assert torch.equal(back, arr)

    def test_ppm_is_binary_p6(self, tmp_path):
        img = texture_corpus(1, 32, 0)[0]
        path = tmp_path / "x.ppm"
        imgio.save_image(img, path)
        assert path.read_bytes()[:2] == b"P6"
        back = imgio.load_image(path)
        assert back.shape == img.shape

    def test_unknown_extension_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            imgio.save_image(torch.rand(3, 8, 8), tmp_path / "x.bmp")

    def test_empty_dir_rejected(self, tmp_path):
        from omlcodec.errors import DataError

        with pytest.raises(DataError):
            imgio.load_image_dir(tmp_path)


class TestSubprocess:
    def test_usage_error_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "omlcodec.cli", "encode"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2

    def test_help_exits_zero(self):
        proc = subprocess.run(
            [sys.executable, "-m", "omlcodec.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "encode" in proc.stdout
