import hashlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowar.cli import ConfigError, RunConfig, main
from flowar.cli import ablate as ablate_mod
from flowar.cli import config as run_config
from flowar.cli import runs
from flowar.cli.ppm import contact_sheet, decode_ppm, encode_ppm, from_uint8, read_ppm, to_uint8
from flowar.engine import read_checkpoint

MICRO = """\
# small enough for a few seconds per command
ar.depth = 1
ar.width = 32
ar.heads = 4
flow.depth = 1
flow.width = 32
flow.heads = 4
flow.freq_dim = 16
data.count = 16
data.eval_count = 16
train.batch_size = 8
train.total_steps = 10
train.warmup_epochs = 1
train.log_every = 1
train.checkpoint_every = 4
"""


@pytest.fixture
def micro_cfg(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO)
    return path


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory):
    """A micro model trained for 40 steps through the CLI."""
    root = tmp_path_factory.mktemp("trained")
    (root / "micro.cfg").write_text(MICRO)
    code = main(["train", "--config", str(root / "micro.cfg"), "--set", "train.total_steps=40",
                 "--out", str(root / "run")])
    assert code == 0
    return root / "run" / runs.CHECKPOINT_NAME


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = run_config.load(None, [])
        assert cfg.problems() == []
        assert cfg.model.ar.depth == 4 and cfg.model.ar.width == 128

    def test_assignments_and_comments(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("model.schedule = 1, 2, 4   # trailing comment\n\ntrain.peak_lr=2e-3\nflow.injection_mode = adaln\n")
        cfg = run_config.load(p)
        assert cfg.model.schedule == (1, 2, 4)
        assert cfg.train.peak_lr == 2e-3
        assert cfg.model.flow.injection_mode == "adaln"

    def test_include_relative_and_override_order(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "base.cfg").write_text("train.peak_lr = 5e-4\ntrain.seed = 3\n")
        top = tmp_path / "top.cfg"
        top.write_text("include sub/base.cfg\ntrain.seed = 9\n")
        cfg = run_config.load(top)
        assert cfg.train.peak_lr == 5e-4 and cfg.train.seed == 9

    def test_set_overrides_file(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("train.seed = 1\n")
        assert run_config.load(p, ["train.seed=7"]).train.seed == 7

    def test_include_cycle(self, tmp_path):
        (tmp_path / "a.cfg").write_text("include b.cfg\n")
        (tmp_path / "b.cfg").write_text("include a.cfg\n")
        with pytest.raises(ConfigError, match="include cycle"):
            run_config.load(tmp_path / "a.cfg")

    def test_problems_listed_exhaustively(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.nope = 1\nar.schedule = 1,2\ntrain.seed = abc\nsample.euler_steps = 0\nnot an assignment\n")
        with pytest.raises(ConfigError) as info:
            run_config.load(p)
        assert len(info.value.problems) == 1  # a malformed line stops before key checks
        p.write_text("train.nope = 1\nar.schedule = 1,2\ntrain.seed = abc\nsample.euler_steps = 0\n")
        with pytest.raises(ConfigError) as info:
            run_config.load(p)
        text = "\n".join(info.value.problems)
        assert "unknown key 'train.nope'" in text
        assert "ar.schedule is derived" in text
        assert "train.seed" in text
        assert "euler_steps" in text
        assert len(info.value.problems) == 4

    def test_presets(self):
        cfg = run_config.load(None, ["ar.preset=tiny", "ar.width=64"])
        assert (cfg.model.ar.depth, cfg.model.ar.width) == (4, 64)
        with pytest.raises(ConfigError, match="ar.preset"):
            run_config.load(None, ["ar.preset=huge"])

    def test_env_var_supplies_path(self, tmp_path, monkeypatch):
        p = tmp_path / "env.cfg"
        p.write_text("train.seed = 11\n")
        q = tmp_path / "explicit.cfg"
        q.write_text("train.seed = 12\n")
        monkeypatch.setenv(run_config.ENV_VAR, str(p))
        assert run_config.load().train.seed == 11
        assert run_config.load(q).train.seed == 12

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            run_config.load(tmp_path / "absent.cfg")

    def test_dump_parse_round_trip(self):
        cfg = run_config.load(None, ["model.schedule=1,2,4", "flow.granularity=per_token", "train.peak_lr=3e-4",
                                     "model.normalize=false", "out_dir=x/y"])
        back = run_config.parse_text(run_config.dump(cfg))
        assert run_config.diff(cfg, back) == {}
        assert run_config.dump(back) == run_config.dump(cfg)

    def test_diff(self):
        a = RunConfig()
        b = run_config.load(None, ["train.seed=5"])
        assert run_config.diff(a, b) == {"train.seed": ("0", "5")}


class TestPPM:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
    def test_round_trip(self, pixels):
        assert np.array_equal(decode_ppm(encode_ppm(pixels)), pixels)

    def test_header_comment(self):
        px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        data = b"P6\n# made by hand\n2 2\n255\n" + px.tobytes()
        assert np.array_equal(decode_ppm(data), px)

    @pytest.mark.parametrize("data", [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n1 1\n65535\n\x00" * 6,
                                      b"P6\n2 2\n255\n\x00", b"P6\n2"])
    def test_rejects(self, data):
        with pytest.raises(ValueError):
            decode_ppm(data)

    def test_float_conversion(self):
        img = np.array([0.0, 0.5, 1.0, 1.7, -0.2, 0.25]).reshape(3, 1, 2)
        px = to_uint8(img)
        assert px.shape == (1, 2, 3)
        assert px[0, 0].tolist() == [0, 255, 0] and px[0, 1].tolist() == [128, 255, 64]
        np.testing.assert_allclose(from_uint8(px), np.rint(np.clip(img, 0, 1) * 255) / 255, atol=1e-7)

    def test_contact_sheet(self):
        imgs = np.ones((10, 3, 4, 4))
        sheet = contact_sheet(imgs, columns=8, pad=1)
        assert sheet.shape == (2 * 5 + 1, 8 * 5 + 1, 3)
        assert sheet[1:5, 1:5].min() == 255 and sheet[0].max() == 0
        assert sheet[6:10, 11:15].max() == 0  # slot 10 is empty


class TestSynth:
    def test_count_balance_and_stable_digest(self, tmp_path, capsys):
        assert main(["synth", "--count", "128", "--classes", "4", "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--count", "128", "--classes", "4", "--out", str(tmp_path / "b")]) == 0
        ma, mb = runs.read_manifest(tmp_path / "a"), runs.read_manifest(tmp_path / "b")
        assert ma["digest"] == mb["digest"]
        labels = [int(v.split()[1].split("=")[1]) for k, v in ma.items() if k.startswith("file.")]
        assert len(labels) == 128 and np.bincount(labels).tolist() == [32] * 4
        assert ma["rule_check"] == "128/128"
        assert len(list((tmp_path / "a").glob("*.ppm"))) == 128

    def test_manifest_hashes_match_files(self, tmp_path):
        runs.synth(tmp_path, 3, 9, 16, 4)
        man = runs.read_manifest(tmp_path)
        for k, v in man.items():
            if k.startswith("file."):
                name, _, sha = v.split()
                assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == sha.split("=")[1]

    def test_size_64_fits_long_schedule(self, tmp_path):
        runs.synth(tmp_path, 4, 4, 64, 0)
        assert read_ppm(tmp_path / "00000.ppm").shape == (64, 64, 3)
        cfg = run_config.load(None, ["model.image_size=64", "model.schedule=1,2,4,8,16", f"data.dir={tmp_path}",
                                     "data.count=4"])
        images, labels = runs.load_dataset(cfg)
        assert images.shape == (4, 3, 64, 64) and labels.tolist() == [0, 1, 2, 3]

    def test_dataset_dir_mismatch(self, tmp_path):
        runs.synth(tmp_path, 4, 4, 16, 0)
        cfg = run_config.load(None, [f"data.dir={tmp_path}", "model.num_classes=3"])
        with pytest.raises(ConfigError, match="classes"):
            runs.load_dataset(cfg)

    def test_invalid_args(self, tmp_path):
        assert main(["synth", "--count", "0", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_smoke(self, micro_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(micro_cfg), "--out", str(out)]) == 0
        assert [p.name for p in out.glob("*.flowar")] == [runs.CHECKPOINT_NAME]
        lines = (out / runs.METRICS_NAME).read_text().splitlines()
        recs = [runs.parse_metrics(line) for line in lines]
        assert [r["step"] for r in recs] == list(range(10))
        assert runs.format_metrics(recs[3]) == lines[3]
        resolved = run_config.parse_text((out / runs.RESOLVED_NAME).read_text())
        assert resolved.out_dir == str(out) and resolved.train.total_steps == 10

    def test_resume_matches_uninterrupted(self, micro_cfg, tmp_path):
        full, part = tmp_path / "full", tmp_path / "part"
        assert main(["train", "--config", str(micro_cfg), "--out", str(full)]) == 0
        assert main(["train", "--config", str(micro_cfg), "--out", str(part), "--max-steps", "4"]) == 0
        ckpt = part / runs.CHECKPOINT_NAME
        assert main(["train", "--config", str(micro_cfg), "--out", str(part), "--resume", str(ckpt)]) == 0
        assert (full / runs.METRICS_NAME).read_text() == (part / runs.METRICS_NAME).read_text()
        _, a = read_checkpoint(full / runs.CHECKPOINT_NAME)
        _, b = read_checkpoint(part / runs.CHECKPOINT_NAME)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_resume_with_other_model_rejected(self, micro_cfg, tmp_path, capsys):
        assert main(["train", "--config", str(micro_cfg), "--out", str(tmp_path / "a"), "--max-steps", "2"]) == 0
        code = main(["train", "--config", str(micro_cfg), "--set", "ar.width=64", "--out", str(tmp_path / "b"),
                     "--resume", str(tmp_path / "a" / runs.CHECKPOINT_NAME)])
        assert code == 2
        assert "different model config" in capsys.readouterr().err

    def test_invalid_schedule_names_sizes(self, micro_cfg, tmp_path, capsys):
        code = main(["train", "--config", str(micro_cfg), "--set", "model.schedule=1,3,4", "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "3" in err and "4" in err
        assert not (tmp_path / runs.CHECKPOINT_NAME).exists()

    def test_all_problems_reported(self, micro_cfg, tmp_path, capsys):
        code = main(["train", "--config", str(micro_cfg), "--set", "train.peak_lr=1e-9", "--set", "bogus.key=1",
                     "--set", "flow.granularity=per_pixel", "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "min_lr" in err and "bogus.key" in err and "granularity" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, micro_cfg, tmp_path):
        code = main(["train", "--config", str(micro_cfg), "--set", "train.peak_lr=1e300", "--set",
                     "train.grad_clip_norm=1e300", "--set", "model.dtype=float32", "--out", str(tmp_path)])
        assert code == 3
        assert (tmp_path / "diverged.json").exists()


class TestSampleAndEvaluate:
    def test_fixed_seed_identical_bytes(self, trained_ckpt, tmp_path):
        for d in ("a", "b"):
            assert main(["sample", "--checkpoint", str(trained_ckpt), "--n", "4", "--steps", "3",
                         "--out", str(tmp_path / d)]) == 0
        for p in sorted((tmp_path / "a").glob("*.ppm")):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_n16_writes_16_files_and_sheet(self, trained_ckpt, tmp_path):
        assert main(["sample", "--checkpoint", str(trained_ckpt), "--n", "16", "--steps", "2",
                     "--out", str(tmp_path)]) == 0
        samples = sorted(tmp_path.glob("sample_*.ppm"))
        assert len(samples) == 16
        assert read_ppm(tmp_path / "sheet.ppm").shape == (2 * 17 + 1, 8 * 17 + 1, 3)
        assert samples[5].name == "sample_0005_c1.ppm"
        assert (tmp_path / runs.RESOLVED_NAME).exists()

    def test_single_class(self, trained_ckpt, tmp_path, capsys):
        assert main(["sample", "--checkpoint", str(trained_ckpt), "--n", "3", "--class", "2", "--steps", "2",
                     "--out", str(tmp_path)]) == 0
        assert all(p.name.endswith("_c2.ppm") for p in tmp_path.glob("sample_*.ppm"))
        assert main(["sample", "--checkpoint", str(trained_ckpt), "--class", "9", "--out", str(tmp_path)]) == 2

    def test_steps_change_bytes(self, trained_ckpt, tmp_path):
        for steps in ("1", "64"):
            assert main(["sample", "--checkpoint", str(trained_ckpt), "--n", "2", "--steps", steps,
                         "--out", str(tmp_path / steps)]) == 0
        a = (tmp_path / "1" / "sample_0000_c0.ppm").read_bytes()
        b = (tmp_path / "64" / "sample_0000_c0.ppm").read_bytes()
        assert a != b

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert main(["sample", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path)]) == 4
        assert main(["evaluate", "--checkpoint", str(tmp_path / "none")]) == 4

    def test_corrupt_checkpoint_is_io_error(self, tmp_path):
        bad = tmp_path / "bad.flowar"
        bad.write_bytes(b"garbage")
        assert main(["evaluate", "--checkpoint", str(bad)]) == 4

    def test_evaluate_writes_metrics(self, trained_ckpt, tmp_path, capsys):
        assert main(["evaluate", "--checkpoint", str(trained_ckpt), "--n", "8", "--steps", "2",
                     "--out", str(tmp_path)]) == 0
        text = (tmp_path / "metrics.txt").read_text()
        out = capsys.readouterr().out
        for key in ("heldout_loss", "energy_distance", "energy_baseline", "class_consistency"):
            assert f"{key} = " in text and f"{key} = " in out

    def test_bad_sample_args(self, trained_ckpt, tmp_path):
        assert main(["sample", "--checkpoint", str(trained_ckpt), "--steps", "0", "--out", str(tmp_path)]) == 2
        assert main(["sample", "--checkpoint", str(trained_ckpt), "--cfg", "-1", "--out", str(tmp_path)]) == 2


class TestAblate:
    @pytest.mark.parametrize("axis", sorted(ablate_mod.AXES))
    def test_variants_differ_only_in_axis(self, axis):
        variants = ablate_mod.variant_configs(axis, 7, ["data.count=16", "train.batch_size=8"])
        assert [v for v, _ in variants] == list(ablate_mod.AXES[axis].values)
        ref = variants[0][1]
        for _, cfg in variants:
            assert cfg.train.steps(cfg.data.count)[2] == 7
            assert set(run_config.diff(ref, cfg)) <= {ablate_mod.AXES[axis].key, "out_dir"}

    def test_axis_value_counts(self):
        assert len(ablate_mod.AXES["injection"].values) == 6
        assert ablate_mod.AXES["schedule"].values == ("1,2,4,8,16", "1,4,8,16", "1,4,16")

    def test_unknown_axis_and_budget(self):
        with pytest.raises(ConfigError):
            ablate_mod.variant_configs("depth", 5)
        with pytest.raises(ConfigError):
            ablate_mod.variant_configs("target", 0)

    def test_rank_and_report(self):
        rows = [{"value": "a", "energy_ratio": 2.0, "energy_distance": 0.2, "class_consistency": 0.5,
                 "heldout_loss": 1.0, "final_train_loss": 1.0},
                {"value": "b", "energy_ratio": float("nan"), "energy_distance": 0.1, "class_consistency": 0.5,
                 "heldout_loss": 0.1, "final_train_loss": 1.0},
                {"value": "c", "energy_ratio": 2.0, "energy_distance": 0.2, "class_consistency": 0.5,
                 "heldout_loss": 0.5, "final_train_loss": 1.0}]
        ranked = ablate_mod.rank(rows)
        assert [r["value"] for r in ranked] == ["c", "a", "b"]
        report = ablate_mod.format_report("target", 3, ranked)
        lines = report.splitlines()
        assert lines[1].split("\t") == list(ablate_mod.REPORT_COLUMNS)
        assert len(lines) == 2 + 3

    def test_direction_line(self):
        ranked = [{"value": "per_token", "rank": 1}, {"value": "per_scale", "rank": 2}]
        assert ablate_mod.direction_checks("granularity", ranked) == [
            "per_scale ranks above per_token: does not hold at this budget"]
        assert ablate_mod.direction_checks("target", ranked) == []

    def test_cli_report(self, micro_cfg, tmp_path, capsys):
        code = main(["ablate", "--config", str(micro_cfg), "--axis", "granularity", "--budget", "3",
                     "--eval-samples", "4", "--out", str(tmp_path)])
        assert code == 0
        report = (tmp_path / "granularity" / "report.tsv").read_text()
        rows = [ln for ln in report.splitlines() if ln and not ln.startswith("#")][1:]
        assert sorted(r.split("\t")[1] for r in rows) == ["per_scale", "per_token"]
        assert "# direction: per_scale ranks above per_token" in report
        for value in ("per_scale", "per_token"):
            assert (tmp_path / "granularity" / value / runs.RESOLVED_NAME).exists()

    def test_parallel_matches_sequential(self, micro_cfg, tmp_path):
        args = ["ablate", "--config", str(micro_cfg), "--axis", "target", "--budget", "2", "--eval-samples", "4"]
        assert main(args + ["--out", str(tmp_path / "seq")]) == 0
        assert main(args + ["--jobs", "2", "--out", str(tmp_path / "par")]) == 0
        seq = (tmp_path / "seq" / "target" / "report.tsv").read_text()
        par = (tmp_path / "par" / "target" / "report.tsv").read_text()
        assert seq == par

def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flowar", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "train", "sample", "evaluate", "ablate"):
        assert cmd in proc.stdout
