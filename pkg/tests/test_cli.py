"""Command-line surface: determinism, contracts, exit codes."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from elf_derain.cli import main
from elf_derain.config import load_run_config, serialize_run_config
from elf_derain.tensor import EngineError


def tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_info.json":
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert main(["synth", "--out", str(root / "ds"), "--count", "4",
                 "--size", "64", "--seed", "3"]) == 0
    return root / "ds"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = main(["train", "--data", str(dataset), "--out", str(out / "run"),
                 "--set", "model.variant=desk", "--set", "train.epochs=4",
                 "--set", "train.seed=1"])
    assert code == 0
    return out / "run"


class TestSynth:
    def test_deterministic_trees(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--count", "3",
                         "--size", "32", "--seed", "5"]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_zero_streaks_rainy_equals_clean(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "dry"), "--count", "2",
                     "--size", "32", "--seed", "0", "--rain", "streaks=0"]) == 0
        for rainy in sorted((tmp_path / "dry").glob("*_rainy.png")):
            clean = rainy.with_name(rainy.name.replace("_rainy", "_clean"))
            assert rainy.read_bytes() == clean.read_bytes()

    def test_manifest_line_count(self, dataset):
        lines = (dataset / "manifest.tsv").read_text().strip().split("\n")
        assert len(lines) == 4

    def test_bad_rain_key(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--count", "1",
                     "--size", "32", "--seed", "0", "--rain", "hail=5"]) == 2


class TestTrain:
    def test_missing_manifest_fails(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code != 0
        assert "manifest" in capsys.readouterr().err

    def test_run_dir_self_describing(self, trained):
        assert (trained / "config.ini").exists()
        assert (trained / "run_info.json").exists()
        assert (trained / "curve.csv").exists()
        rc = load_run_config(trained / "config.ini")
        assert rc.model.variant == "desk"

    def test_config_file_drives_training(self, dataset, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nvariant = desk\n\n[train]\nepochs = 2\nseed = 4\n")
        code = main(["train", "--config", str(cfg), "--data", str(dataset),
                     "--out", str(tmp_path / "cfg_run")])
        assert code == 0
        resolved = load_run_config(tmp_path / "cfg_run" / "config.ini")
        assert resolved.model.channels == 8
        assert resolved.train.epochs == 2

    def test_resume_continues(self, dataset, trained, tmp_path):
        code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "r2"),
                     "--set", "model.variant=desk", "--set", "train.epochs=1",
                     "--set", f"train.resume={trained / 'ckpt_final.elf'}"])
        assert code == 0
        curve = (tmp_path / "r2" / "curve.csv").read_text().splitlines()
        first_step = int(curve[1].split(",")[0])
        assert first_step == 9  # 4 epochs x 2 steps, then continue


class TestDerain:
    def test_extents_and_determinism(self, dataset, trained, tmp_path):
        rainy = sorted(dataset.glob("*_rainy.png"))[0]
        outs = []
        for name in ("d1", "d2"):
            code = main(["derain", "--ckpt", str(trained / "ckpt_final.elf"),
                         "--in", str(rainy), "--out", str(tmp_path / name),
                         "--dump-intermediates"])
            assert code == 0
            outs.append(tree_digest(tmp_path / name))
        assert outs[0] == outs[1]

        from elf_derain.data import load_png
        original = load_png(rainy)
        derained = load_png(tmp_path / "d1" / f"{rainy.stem}_derained.png")
        assert derained.shape == original.shape

    def test_dumped_decomposition_bitexact(self, dataset, trained, tmp_path):
        rainy = sorted(dataset.glob("*_rainy.png"))[1]
        assert main(["derain", "--ckpt", str(trained / "ckpt_final.elf"),
                     "--in", str(rainy), "--out", str(tmp_path / "dump"),
                     "--dump-intermediates"]) == 0
        stem = rainy.stem
        rain = np.load(tmp_path / "dump" / f"{stem}_rain_sub.npy")
        derained = np.load(tmp_path / "dump" / f"{stem}_derained_sub.npy")
        rainy_sub = np.load(tmp_path / "dump" / f"{stem}_rainy_sub.npy")
        assert np.array_equal(rain + derained, rainy_sub)

    def test_directory_input(self, dataset, trained, tmp_path):
        code = main(["derain", "--ckpt", str(trained / "ckpt_final.elf"),
                     "--in", str(dataset), "--out", str(tmp_path / "all")])
        assert code == 0
        n_inputs = len(list(dataset.glob("*.png")))
        n_outputs = len(list((tmp_path / "all").glob("*_derained.png")))
        assert n_outputs == n_inputs

    def test_indivisible_input_fails(self, trained, tmp_path, capsys):
        from elf_derain.data import save_png

        img = np.random.default_rng(0).uniform(0, 1, (20, 20, 3))
        save_png(img, tmp_path / "odd.png")
        code = main(["derain", "--ckpt", str(trained / "ckpt_final.elf"),
                     "--in", str(tmp_path / "odd.png"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "multiples" in capsys.readouterr().err


class TestEval:
    def test_csv_output(self, dataset, trained, capsys):
        assert main(["eval", "--ckpt", str(trained / "ckpt_final.elf"),
                     "--data", str(dataset)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "id,psnr_db,ssim,ms_per_image"
        assert len(out) == 6  # header + 4 rows + summary
        assert out[-1].startswith("# mean_psnr=")


class TestParams:
    def test_variants(self, capsys):
        for variant, lo, hi in (("ELF", 1_072_400, 1_991_600),
                                ("ELF-LW", 396_200, 735_800)):
            assert main(["params", "--variant", variant]) == 0
            line = capsys.readouterr().out.splitlines()[0]
            count = int(line.split(":")[1].split()[0].replace(",", ""))
            assert lo <= count <= hi


class TestHistcheck:
    def test_passes_on_smooth_gentle_suite(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "hs"), "--count", "6",
                     "--size", "128", "--seed", "11",
                     "--rain", "streaks=2500", "--rain", "intensity=0.15,0.5"]) == 0
        code = main(["histcheck", "--data", str(tmp_path / "hs"), "--factor", "2"])
        out = capsys.readouterr().out
        assert code == 0, out
        assert "PASS" in out


class TestGradcheckCmd:
    def test_single_scope(self, capsys):
        assert main(["gradcheck", "--scope", "layer_norm"]) == 0
        assert "PASS" in capsys.readouterr().out


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nflux = 9\n")
        with pytest.raises(EngineError, match="unknown key"):
            load_run_config(cfg)

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[warp]\nspeed = 9\n")
        with pytest.raises(EngineError, match="unknown section"):
            load_run_config(cfg)

    def test_serialize_parse_roundtrip(self, tmp_path):
        rc = load_run_config(None, ["model.variant=ELF-LW", "train.epochs=7",
                                    "rain.intensity=0.2,0.6", "optim.base_lr=1e-3"])
        text = serialize_run_config(rc)
        path = tmp_path / "c.ini"
        path.write_text(text)
        rc2 = load_run_config(path)
        assert rc2.model.channels == 32
        assert rc2.train.epochs == 7
        assert rc2.rain.intensity == (0.2, 0.6)
        assert rc2.optim.base_lr == 1e-3

    def test_missing_file_raises(self):
        with pytest.raises(EngineError, match="not found"):
            load_run_config("/nonexistent/config.ini")
