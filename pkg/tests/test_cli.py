"""Command-line surface: config handling, artifact contracts, exit codes.

Everything drives ``cli.main`` in-process with a miniature config; the
pipeline fixture runs annotate -> train -> generate once and later tests
branch off it read-only (artifacts are write-once).
"""

import json
import os

import numpy as np
import pytest

from segfactory import cameras, cli, factory
from segfactory import backbone as bb
from segfactory import scene as sc

_TINY_YAML = """\
seed: 7
raw_resolution: 8
sr_factor: 2
samples_per_ray: 16
oracle_samples: 48
train_steps: 80
rays_per_step: 64
inv_resolution: 16
inv_samples_per_ray: 16
inv_steps: 6
restarts: 1
patience: 50
fusion_views: 4
"""


def run(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfgfile = root / "tiny.yaml"
    cfgfile.write_text(_TINY_YAML)
    c = ["--config", str(cfgfile)]
    paths = {"root": root, "cfg": c,
             "ann": str(root / "ann"), "ckpt": str(root / "ckpt.bin"),
             "data": str(root / "data")}
    assert run("annotate", *c, "--scenes", "2", "--views", "2",
               "--out", paths["ann"]) == 0
    assert run("train", *c, "--annotations", paths["ann"],
               "--out", paths["ckpt"]) == 0
    assert run("generate", *c, "--checkpoint", paths["ckpt"], "--n", "4",
               "--pose-mode", "grid", "--out", paths["data"]) == 0
    return paths


# ===========================================================================
# Config file handling
# ===========================================================================

class TestConfig:
    def test_defaults_without_file(self):
        cfg = cli.load_config(None)
        assert cfg.seed == 0 and cfg.raw_resolution == 32

    def test_overrides_beat_file(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("seed: 3\nthreads: 2\n")
        cfg = cli.load_config(str(f), seed=9)
        assert cfg.seed == 9 and cfg.threads == 2

    def test_unknown_keys_rejected(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("seed: 3\nraw_res: 16\n")
        with pytest.raises(cli.UsageError, match="raw_res"):
            cli.load_config(str(f))

    def test_missing_file_rejected(self):
        with pytest.raises(cli.UsageError, match="missing config"):
            cli.load_config("/nonexistent/config.yaml")

    def test_non_mapping_rejected(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("- a\n- b\n")
        with pytest.raises(cli.UsageError, match="mapping"):
            cli.load_config(str(f))

    def test_hash_changes_with_values(self):
        a = cli.GlobalConfig()
        b = cli.GlobalConfig(seed=1)
        assert a.config_hash() != b.config_hash()
        assert len(a.config_hash()) == 16

    def test_bad_config_exits_2(self, tmp_path, capsys):
        f = tmp_path / "c.yaml"
        f.write_text("nonsense_key: 1\n")
        assert run("annotate", "--config", str(f), "--out",
                   str(tmp_path / "x")) == 2
        assert "nonsense_key" in capsys.readouterr().err


# ===========================================================================
# Pipeline artifacts
# ===========================================================================

class TestPipeline:
    def test_annotation_artifacts(self, pipeline):
        ann_dir = pipeline["ann"]
        names = set(os.listdir(ann_dir))
        assert {"manifest.json", "masks.npy", "latents.npy", "rgbs.npy",
                "depths.npy", "run_record.json"} <= names
        doc = json.load(open(os.path.join(ann_dir, "manifest.json")))
        assert doc["kind"] == "annotations" and doc["count"] == 4
        assert np.load(os.path.join(ann_dir, "masks.npy")).shape \
            == (4, 16, 16)

    def test_annotation_roundtrip_matches_oracle(self, pipeline):
        from segfactory import oracle
        loaded = cli._load_annotations(pipeline["ann"])
        fresh = oracle.make_annotations(
            seed=7, n_scenes=2, views_per_scene=2, resolution=16,
            n_samples=48)
        assert len(loaded) == len(fresh)
        for a, b in zip(loaded.annotations, fresh.annotations):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_array_equal(a.latent, b.latent)
            assert a.pose.azimuth == b.pose.azimuth

    def test_checkpoint_and_log(self, pipeline):
        assert os.path.exists(pipeline["ckpt"])
        log = open(pipeline["ckpt"] + ".log.csv").read().splitlines()
        assert log[0].startswith("step")
        assert len(log) > 1

    def test_dataset_manifest_validates(self, pipeline):
        man = factory.DatasetManifest.load(
            os.path.join(pipeline["data"], factory.MANIFEST_NAME))
        assert len(man) == 4
        man.validate_files()

    def test_run_record_contents(self, pipeline):
        rec = json.load(open(os.path.join(pipeline["data"],
                                          "run_record.json")))
        assert rec["command"][0] == "generate" or "generate" in rec["command"]
        assert rec["seed"] == 7
        assert len(rec["config_hash"]) == 16
        assert rec["wall_time_s"] >= 0
        assert "manifest.json" in rec["outputs"]

    def test_backproject_and_fuse(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        clouds_dir = str(tmp_path / "clouds")
        assert run("backproject", *c, "--dataset", pipeline["data"],
                   "--ids", "0-3", "--out", clouds_dir) == 0
        plys = sorted(os.listdir(clouds_dir))
        assert "cloud_00000.ply" in plys
        fused = str(tmp_path / "fused.ply")
        assert run("fuse", *c, "--clouds",
                   *[os.path.join(clouds_dir, p) for p in plys
                     if p.endswith(".ply")],
                   "--out", fused) == 0
        factory.load_ply(fused)             # parses

    def test_ids_parsing(self):
        assert cli._parse_ids("all", 4) == [0, 1, 2, 3]
        assert cli._parse_ids("0,2", 4) == [0, 2]
        assert cli._parse_ids("1-3", 4) == [1, 2, 3]
        with pytest.raises(cli.UsageError, match="outside"):
            cli._parse_ids("9", 4)


# ===========================================================================
# Determinism and write-once
# ===========================================================================

def _tree_bytes(root: str) -> dict:
    """Relative path -> content bytes for every file except run-records
    (those carry wall time by design)."""
    out = {}
    for base, _dirs, files in os.walk(root):
        for f in files:
            if f == "run_record.json" or f.endswith(".run.json"):
                continue
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


class TestDeterminism:
    def test_annotate_reruns_byte_identical(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        again = str(tmp_path / "ann2")
        assert run("annotate", *c, "--scenes", "2", "--views", "2",
                   "--out", again) == 0
        assert _tree_bytes(pipeline["ann"]) == _tree_bytes(again)

    def test_generate_thread_count_invisible(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        a = str(tmp_path / "t1")
        b = str(tmp_path / "t4")
        assert run("generate", *c, "--threads", "1", "--checkpoint",
                   pipeline["ckpt"], "--n", "3", "--out", a) == 0
        assert run("generate", *c, "--threads", "4", "--checkpoint",
                   pipeline["ckpt"], "--n", "3", "--out", b) == 0
        assert _tree_bytes(a) == _tree_bytes(b)

    def test_write_once_refusal(self, pipeline, capsys):
        c = pipeline["cfg"]
        assert run("annotate", *c, "--scenes", "1", "--views", "1",
                   "--out", pipeline["ann"]) == 2
        assert "refusing to overwrite" in capsys.readouterr().err

    def test_missing_prerequisite_names_path(self, pipeline, tmp_path,
                                             capsys):
        c = pipeline["cfg"]
        missing = str(tmp_path / "nope.bin")
        assert run("generate", *c, "--checkpoint", missing, "--n", "1",
                   "--out", str(tmp_path / "x")) == 2
        assert missing in capsys.readouterr().err


# ===========================================================================
# Inversion / editing / eval commands
# ===========================================================================

class TestInvertEditCLI:
    def test_invert_rgb_artifacts(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        z = np.random.default_rng(1).uniform(-1, 1, 16)
        pose = cameras.CameraPose(azimuth=0.1, elevation=0.12)
        rgb = bb.render(z, pose, bb.RenderConfig(
            resolution=16, samples_per_ray=16, stratified=False)).rgb
        target = str(tmp_path / "target.npy")
        np.save(target, rgb)
        out = str(tmp_path / "inv")
        assert run("invert", "rgb", *c, "--target", target,
                   "--steps", "4", "--out", out) == 0
        doc = json.load(open(os.path.join(out, "inversion.json")))
        assert len(doc["z"]) == 16
        assert doc["best_loss"] >= 0
        hist = open(os.path.join(out, "history.csv")).read().splitlines()
        assert len(hist) - 1 == doc["steps_evaluated"]
        assert os.path.exists(os.path.join(out, "recon_rgb.png"))

    def test_invert_seg_requires_checkpoint(self, pipeline, tmp_path,
                                            capsys):
        c = pipeline["cfg"]
        target = str(tmp_path / "m.npy")
        np.save(target, np.zeros((16, 16), np.uint8))
        assert run("invert", "seg", *c, "--target", target,
                   "--out", str(tmp_path / "o")) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_edit_artifacts(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        man = factory.DatasetManifest.load(
            os.path.join(pipeline["data"], factory.MANIFEST_NAME))
        rec = man.records[0]
        z0 = str(tmp_path / "z0.npy")
        np.save(z0, rec.latent)
        posef = str(tmp_path / "pose.json")
        json.dump(rec.pose.to_json(), open(posef, "w"))
        roi = str(tmp_path / "roi.npy")
        np.save(roi, np.ones((16, 16), bool))
        rgbf = str(tmp_path / "rgb.npy")
        np.save(rgbf, np.load(os.path.join(pipeline["data"],
                                           rec.rgb_path)).astype(float))
        out = str(tmp_path / "edit")
        assert run("edit", *c, "--checkpoint", pipeline["ckpt"],
                   "--z", z0, "--pose", posef,
                   "--medit", os.path.join(pipeline["data"],
                                           rec.mask_path),
                   "--region", roi, "--rgb", rgbf,
                   "--steps", "2", "--out", out) == 0
        rep = json.load(open(os.path.join(out, "edit_report.json")))
        assert 0.0 <= rep["region_agreement"] <= 1.0
        assert rep["lambdas"] == [1.0, 10.0, 1.0]
        assert os.path.exists(os.path.join(out, "z_star.npy"))
        assert os.path.exists(os.path.join(out, "views", "0_after_rgb.png"))
        hist = open(os.path.join(out, "history.csv")).read().splitlines()
        assert hist[0] == "step,total,label,rgb,perceptual"

    def test_mask_png_roundtrip(self, pipeline, tmp_path):
        from segfactory import evaluation
        mask = np.load(os.path.join(
            pipeline["data"],
            factory.DatasetManifest.load(
                os.path.join(pipeline["data"],
                             factory.MANIFEST_NAME)).records[0].mask_path))
        png = str(tmp_path / "m.png")
        evaluation.save_png(png, evaluation.colorize_mask(mask))
        np.testing.assert_array_equal(cli._load_mask(png, 16), mask)


class TestEvalCLI:
    def test_eval_seg_json(self, pipeline, tmp_path, capsys):
        c = pipeline["cfg"]
        out = str(tmp_path / "seg")
        assert run("eval", "seg", *c, "--checkpoint", pipeline["ckpt"],
                   "--scenes", "2", "--json", "--out", out) == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload) >= {"miou", "accuracy", "iou", "scenes"}
        disk = json.load(open(os.path.join(out, "seg_metrics.json")))
        assert disk["miou"] == payload["miou"]
        conf = np.loadtxt(os.path.join(out, "confusion.csv"),
                          delimiter=",")
        assert conf.shape == (4, 4) and conf.sum() == 2 * 16 * 16

    def test_eval_consistency_artifacts(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        out = str(tmp_path / "cons")
        assert run("eval", "consistency", *c, "--checkpoint",
                   pipeline["ckpt"], "--latents", "1", "--frames", "3",
                   "--resolution", "16", "--out", out) == 0
        doc = json.load(open(os.path.join(out, "consistency.json")))
        assert doc["mean_ceiling"] > 0.9    # oracle agrees with itself
        assert 0.0 <= doc["mean_consistency"] <= 1.0
        assert os.path.exists(os.path.join(out, "epi_00.png"))

    def test_eval_consistency_rejects_bad_resolution(self, pipeline,
                                                     tmp_path, capsys):
        c = pipeline["cfg"]
        assert run("eval", "consistency", *c, "--checkpoint",
                   pipeline["ckpt"], "--latents", "1", "--frames", "2",
                   "--resolution", "15",
                   "--out", str(tmp_path / "x")) == 2
        assert "divisible" in capsys.readouterr().err

    def test_eval_epi_artifacts(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        out = str(tmp_path / "epi")
        assert run("eval", "epi", *c, "--checkpoint", pipeline["ckpt"],
                   "--frames", "3", "--resolution", "16",
                   "--out", out) == 0
        from PIL import Image
        img = Image.open(os.path.join(out, "epi_semantic.png"))
        assert img.size == (16, 3)          # width x frames
        assert os.path.exists(os.path.join(out, "epi_rgb.png"))

    def test_eval_trend_sizes_must_ascend(self, pipeline, tmp_path,
                                          capsys):
        c = pipeline["cfg"]
        assert run("eval", "pointcloud-trend", *c, "--checkpoint",
                   pipeline["ckpt"], "--sizes", "2,1",
                   "--out", str(tmp_path / "x")) == 2
        assert "ascend" in capsys.readouterr().err

    def test_eval_ablate_tiny(self, pipeline, tmp_path):
        c = pipeline["cfg"]
        out = str(tmp_path / "abl")
        assert run("eval", "ablate", *c, "--scenes", "2", "--views", "1",
                   "--counts", "1,2", "--steps", "6",
                   "--individual-test", "1", "--video-latents", "1",
                   "--video-frames", "2", "--json", "--out", out) == 0
        doc = json.load(open(os.path.join(out, "ablation.json")))
        assert len(doc["rows"]) == 6        # 2 + 2 + 2 cells
        assert os.path.exists(os.path.join(out, "ablation.csv"))
        assert os.path.exists(os.path.join(out, "ablation.txt"))
