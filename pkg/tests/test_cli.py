import json
import subprocess
import sys

import numpy as np
import pytest

from latentfield import tensorio
from latentfield.adapter import init_adapter
from latentfield.cli import main
from latentfield.scene import load_scene

TINY = {
    "scene.views": 4,
    "scene.height": 16,
    "scene.width": 16,
    "train.samples_per_ray": 8,
    "train.rays_per_batch": 128,
    "adapter.channels": 8,
    "edit.warmup_steps": 4,
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "scene")]) == 0
    assert main(["init", "--config", str(cfg), "--scene", str(root / "scene"), "--steps", "12", "--out", str(root / "init")]) == 0
    return root, str(cfg)


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_synth_is_loadable_and_reproducible(work, tmp_path):
    root, cfg = work
    ds = load_scene(root / "scene")
    assert ds.n_views == 4 and ds.latent_shape == (16, 16, 4)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert files(tmp_path / "again") == files(root / "scene")


def test_synth_defaults_and_flags(tmp_path):
    assert main(["synth", "--spec", "box2", "--views", "3", "--seed", "2", "--out", str(tmp_path)]) == 0
    ds = load_scene(tmp_path)
    assert ds.n_views == 3 and ds.latent_shape == (48, 48, 4)
    assert set(np.unique(np.concatenate([r.ravel() for r in ds.region_labels]))) == {0, 1, 2}


@pytest.mark.parametrize(
    "argv",
    [
        ["synth", "--views", "1"],
        ["synth", "--spec", "sphere"],
        ["synth"],
        ["init", "--steps", "3"],
        ["bogus"],
    ],
)
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    if "--out" not in argv and argv[0] != "bogus" and argv != ["synth"]:
        argv = argv + ["--out", str(tmp_path / "o")]
    assert main(argv) == 2


def test_bad_config_file_exits_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"edit.nu": 1}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def test_init_writes_log_checkpoint_and_config(work):
    root, _ = work
    log = [json.loads(x) for x in (root / "init" / "init_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(12))
    assert (root / "init" / "checkpoint" / "checkpoint.json").exists()
    saved = json.loads((root / "init" / "run_config.json").read_text())
    assert saved["init.steps"] == 12 and saved["adapter.channels"] == 8


def test_resume_matches_uninterrupted_run(work, tmp_path):
    # The warm-up length scales with --steps, so a single-phase schedule keeps both runs comparable.
    root, _ = work
    cfg = tmp_path / "flat.json"
    cfg.write_text(json.dumps({**TINY, "init.warmup_reference": 0}))
    cfg = str(cfg)
    scene = str(root / "scene")
    assert main(["init", "--config", cfg, "--scene", scene, "--steps", "12", "--out", str(tmp_path / "straight")]) == 0
    assert main(["init", "--config", cfg, "--scene", scene, "--steps", "6", "--out", str(tmp_path / "a")]) == 0
    assert main(["init", "--config", cfg, "--scene", scene, "--steps", "12", "--resume", str(tmp_path / "a" / "checkpoint"), "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "b" / "checkpoint") == files(tmp_path / "straight" / "checkpoint")
    assert main(["init", "--config", cfg, "--scene", scene, "--steps", "3", "--resume", str(tmp_path / "a" / "checkpoint"), "--out", str(tmp_path / "c")]) == 2


def test_no_adapter_flag_leaves_adapter_at_init(work, tmp_path):
    root, cfg = work
    assert main(["init", "--config", cfg, "--scene", str(root / "scene"), "--steps", "4", "--no-adapter", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "run_config.json").read_text())["init.no_adapter"] is True
    ad = tensorio.read_tensor(tmp_path / "checkpoint" / "adapter.lte")
    assert np.array_equal(ad, init_adapter(8, 1).params.numpy())
    log = [json.loads(x) for x in (tmp_path / "init_log.jsonl").read_text().splitlines()]
    assert all(r["loss_f"] is None for r in log)


@pytest.mark.slow
def test_init_reduces_loss_tenfold(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "train.samples_per_ray": 16, "train.rays_per_batch": 256}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["init", "--config", str(cfg), "--scene", str(tmp_path / "s"), "--out", str(tmp_path / "i")]) == 0
    loss = [json.loads(x)["loss_r"] for x in (tmp_path / "i" / "init_log.jsonl").read_text().splitlines()]
    assert len(loss) == 2000
    assert np.mean(loss[-20:]) < 0.1 * loss[0]


@pytest.fixture(scope="module")
def edited(work):
    root, cfg = work
    out = root / "edit"
    argv = ["edit", "--config", cfg, "--scene", str(root / "scene"), "--checkpoint", str(root / "init" / "checkpoint")]
    argv += ["--iterations", "23", "--editing-rate", "5", "--dump-masks", str(root / "masks"), "--out", str(out)]
    assert main(argv) == 0
    return out


def test_edit_logs_and_dumps_one_mask_per_update(work, edited):
    root, _ = work
    log = [json.loads(x) for x in (edited / "session.jsonl").read_text().splitlines()]
    assert len(log) == 23
    assert sum(r["du_view"] is not None for r in log) == 5
    assert len(list((root / "masks").glob("*.pgm"))) == 5
    assert (edited / "checkpoint" / "checkpoint.json").exists()
    assert load_scene(edited / "scene").n_views == 4


def test_two_clause_prompt_gives_two_masks_per_update(work, tmp_path):
    root, cfg = work
    argv = ["edit", "--config", cfg, "--scene", str(root / "scene"), "--checkpoint", str(root / "init" / "checkpoint")]
    argv += ["--iterations", "10", "--prompts", "make the roof red and the walls blue", "--dump-masks", str(tmp_path / "m"), "--out", str(tmp_path / "e")]
    assert main(argv) == 0
    names = sorted(p.name for p in (tmp_path / "m").iterdir())
    assert names == ["du00000_view000_p0.pgm", "du00000_view000_p1.pgm"]


def test_edit_requires_inputs(work, tmp_path):
    root, cfg = work
    assert main(["edit", "--config", cfg, "--scene", str(root / "scene"), "--out", str(tmp_path)]) == 2
    argv = ["edit", "--config", cfg, "--scene", str(root / "scene"), "--checkpoint", str(root / "init" / "checkpoint"), "--out", str(tmp_path)]
    assert main(argv + ["--backend", "unet"]) == 2
    assert main(argv + ["--backend", "external"]) == 2


def test_eval_identical_checkpoints_are_capped(work, tmp_path, capsys):
    root, cfg = work
    ck = str(root / "init" / "checkpoint")
    assert main(["eval", "--config", cfg, "--reference", ck, "--checkpoint", ck, "--scene", str(root / "scene"), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["psnr_mean"] == 99.0 and m["psnr_outside_mean"] == 99.0
    assert all(v["psnr"] == 99.0 for v in m["views"]) and m["inside_cosine"] is None
    assert "psnr_mean" in capsys.readouterr().out


def test_eval_reports_edit_metrics(work, edited, tmp_path):
    root, cfg = work
    argv = ["eval", "--config", cfg, "--reference", str(root / "init" / "checkpoint"), "--checkpoint", str(edited / "checkpoint")]
    assert main(argv + ["--scene", str(root / "scene"), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["psnr_outside_mean"] < 99.0 and -1.0 <= m["inside_cosine"] <= 1.0


def test_eval_missing_checkpoint_exits_2(work, tmp_path):
    root, cfg = work
    argv = ["eval", "--reference", str(root / "init" / "checkpoint"), "--checkpoint", str(tmp_path / "nothing"), "--out", str(tmp_path)]
    assert main(argv) == 2


def test_render_then_decode_with_64x_fewer_rays(work, tmp_path):
    root, cfg = work
    ck = str(root / "init" / "checkpoint")
    assert main(["render", "--config", cfg, "--checkpoint", ck, "--views", "0,2", "--out", str(tmp_path / "a")]) == 0
    events = [json.loads(x) for x in (tmp_path / "a" / "render_log.jsonl").read_text().splitlines()]
    assert [(e["event"], e["view"]) for e in events] == [("render", 0), ("decode", 0), ("render", 2), ("decode", 2)]
    for e in events[::2]:
        assert e["rays"] == 16 * 16 and e["pixels"] == 64 * e["rays"]
    img = tensorio.read_tensor(tmp_path / "a" / "image_002.lte")
    assert img.shape == (128, 128, 3)
    assert tensorio.read_tensor(tmp_path / "a" / "latent_000.lte").shape == (16, 16, 4)
    assert main(["render", "--config", cfg, "--checkpoint", ck, "--views", "0,2", "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert main(["render", "--config", cfg, "--checkpoint", ck, "--views", "9", "--out", str(tmp_path / "c")]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "latentfield", "synth", "--views", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2 and "at least 2 views" in r.stderr
