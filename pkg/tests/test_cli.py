import numpy as np
import pytest

from spinet.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from spinet.cli import hydrogen_energy, main, run_experiment
from spinet.config import load_config_file, parse_config_text, resolve, resolved_text
from spinet.errors import ConfigError, CorruptChecksum, FormatVersionMismatch, SpinIOError
from spinet.heatmap import diverging_pixels, export_heatmap, gray_pixels, pgm_bytes, ppm_bytes
from spinet.spin import AveragedState, RmsState, TrainState


# -- config ----------------------------------------------------------------------------


def test_config_parsing_and_precedence(tmp_path):
    text = "# comment\nK = 3   # trailing\nlearning_rate=0.05\nnegate = yes\nhidden = 8, 8\n"
    vals = parse_config_text(text)
    assert vals == {"K": 3, "learning_rate": 0.05, "negate": True, "hidden": (8, 8)}
    cfg = resolve("tabular", vals, {"K": 2, "seed": None})
    assert cfg.K == 2 and cfg.learning_rate == 0.05 and cfg.seed == 0
    path = tmp_path / "c.cfg"
    path.write_text(resolved_text(cfg))
    again = resolve("tabular", load_config_file(path))
    assert again == cfg


@pytest.mark.parametrize(
    "text",
    ["K = 3\nK = 4\n", "nonsense\n", "bogus = 1\n", "K = three\n", "negate = maybe\n", "experiment = hydrogen\n"],
)
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        resolve("tabular", parse_config_text(text))


def test_timescale_rule_named():
    with pytest.raises(ConfigError, match="timescale"):
        resolve("tabular", {"beta": 0.0005})


def test_missing_config_file():
    with pytest.raises(SpinIOError):
        load_config_file("/nonexistent/file.cfg")


def test_hydrogen_energy_shells():
    assert [hydrogen_energy(i) for i in range(10)] == [-1.0] + [-1 / 9] * 3 + [-1 / 25] * 5 + [-1 / 49]


# -- heatmaps ----------------------------------------------------------------------------


def test_heatmap_zero_field():
    assert np.all(gray_pixels(np.zeros((3, 4))) == 128)
    assert np.all(diverging_pixels(np.zeros((3, 4))) == 255)


def test_heatmap_sign_flip_swaps_channels():
    v = np.random.default_rng(0).standard_normal((5, 6))
    a, b = diverging_pixels(v), diverging_pixels(-v)
    np.testing.assert_array_equal(a[..., 0], b[..., 2])
    np.testing.assert_array_equal(a[..., 2], b[..., 0])
    np.testing.assert_array_equal(a[..., 1], b[..., 1])


def test_heatmap_extremes():
    v = np.array([[-1.0, 0.0], [0.0, 1.0]])
    g = gray_pixels(v)
    assert g[0, 0] == 0 and g[1, 1] == 255 and g[0, 1] == 128
    c = diverging_pixels(v)
    assert tuple(c[0, 0]) == (0, 0, 255)
    assert tuple(c[1, 1]) == (255, 0, 0)
    assert tuple(c[0, 1]) == (255, 255, 255)


def test_heatmap_files(tmp_path):
    v = np.array([[-2.0, 1.0, 0.5]])
    pgm, ppm = export_heatmap(v, tmp_path / "h")
    assert pgm.read_bytes() == pgm_bytes(v) and pgm.read_bytes().startswith(b"P5\n3 1\n255\n")
    assert ppm.read_bytes() == ppm_bytes(v) and ppm.read_bytes().startswith(b"P6\n3 1\n255\n")
    assert len(ppm.read_bytes()) == len(b"P6\n3 1\n255\n") + 9
    with pytest.raises(ValueError):
        export_heatmap(np.array([[np.nan]]), tmp_path / "bad")
    with pytest.raises(SpinIOError):
        export_heatmap(v, tmp_path / "missing" / "h")


# -- checkpoints ----------------------------------------------------------------------------


def random_state(seed=0, k=3, p=7):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((k, k))
    return TrainState(
        step=123,
        params=rng.standard_normal(p),
        averages=AveragedState(a @ a.T, rng.standard_normal((k, k, p)), 0.01),
        opt=RmsState(rng.random(p)),
        seed=42,
    )


def test_checkpoint_roundtrip(tmp_path):
    st = random_state()
    path = tmp_path / "a.spin"
    save_checkpoint(st, path)
    back = load_checkpoint(path)
    assert back.step == 123 and back.seed == 42
    np.testing.assert_array_equal(back.params, st.params)
    np.testing.assert_array_equal(back.averages.jac_sigma_bar, st.averages.jac_sigma_bar)
    np.testing.assert_array_equal(back.opt.mean_square, st.opt.mean_square)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_corruption():
    data = checkpoint_bytes(random_state())
    with pytest.raises(CorruptChecksum):
        parse_checkpoint(data[:-10])
    flipped = bytearray(data)
    flipped[40] ^= 1
    with pytest.raises(CorruptChecksum):
        parse_checkpoint(bytes(flipped))
    bumped = bytearray(data)
    bumped[4] = 2
    with pytest.raises(FormatVersionMismatch):
        parse_checkpoint(bytes(bumped))


# -- runs ----------------------------------------------------------------------------


def tabular_cfg(**kw):
    base = dict(iters=300, checkpoint_every=100, n_states=8, K=3, batch_size=16, learning_rate=1e-2)
    base.update(kw)
    return resolve("tabular", base)


def test_tabular_default_comparison(tmp_path):
    rows = run_experiment(resolve("tabular"), tmp_path)
    assert len(rows) == 4
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == "index,learned,oracle,abs_diff"
    assert all(float(line.split(",")[3]) < 1e-2 for line in lines[1:])
    for name in ("log.csv", "final.spin", "eigenvalues.csv", "eigenvectors.csv", "config.resolved"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "heatmaps" / "eigenvectors.pgm").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir())[0] == "step_00001000.spin"


def test_log_determinism_and_resolved_rerun(tmp_path):
    cfg = tabular_cfg()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    log = (tmp_path / "a" / "log.csv").read_bytes()
    assert log == (tmp_path / "b" / "log.csv").read_bytes()
    assert main(["tabular", "--config", str(tmp_path / "a" / "config.resolved"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "log.csv").read_bytes() == log


def test_resume_continues_log(tmp_path):
    cfg = tabular_cfg()
    run_experiment(cfg, tmp_path / "full")
    run_experiment(tabular_cfg(iters=200), tmp_path / "part")
    ckpt = tmp_path / "part" / "checkpoints" / "step_00000100.spin"
    run_experiment(cfg, tmp_path / "part", resume=ckpt)
    assert (tmp_path / "part" / "log.csv").read_bytes() == (tmp_path / "full" / "log.csv").read_bytes()
    assert (tmp_path / "part" / "final.spin").read_bytes() == (tmp_path / "full" / "final.spin").read_bytes()


def test_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("beta = 0.0005\n")
    assert main(["tabular", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "timescale" in capsys.readouterr().err
    assert main(["tabular", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_lock_blocks_second_run(tmp_path):
    (tmp_path / ".spinet.lock").write_text("1")
    with pytest.raises(SpinIOError, match="in use"):
        run_experiment(tabular_cfg(), tmp_path)


def test_baseline_grid_small(tmp_path):
    cfg = resolve("baseline-grid", {"grid_size": 16, "halfwidth": 8.0, "K": 4})
    values = run_experiment(cfg, tmp_path)
    assert values.shape == (4,) and np.all(np.diff(values) >= 0)
    assert (tmp_path / "heatmaps" / "eigenvector_0.ppm").exists()
    assert (tmp_path / "eigenvalues.csv").read_text().startswith("index,eigenvalue,exact")


def test_hydrogen_smoke(tmp_path):
    cfg = resolve(
        "hydrogen",
        {"iters": 20, "hidden": (8, 8), "K": 2, "eval_samples": 512, "heatmap_size": 8, "checkpoint_every": 10,
         "halfwidth": 5.0, "learning_rate": 1e-3},
    )
    rows = run_experiment(cfg, tmp_path)
    assert len(rows) == 2
    assert (tmp_path / "heatmaps" / "eigenfunction_1.pgm").exists()
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 1 + 1  # log_every = 100


def test_sfa_smoke(tmp_path):
    cfg = resolve(
        "sfa-video",
        {"iters": 10, "hidden": (8,), "K": 3, "n_clips": 2, "clip_frames": 20, "heldout_clips": 1,
         "frame_size": 8, "clips_per_batch": 2, "frames_per_clip": 5, "heatmap_size": 4, "learning_rate": 1e-3},
    )
    rows = run_experiment(cfg, tmp_path)
    assert len(rows) == 4  # constant feature plus K
    assert (tmp_path / "eigenvalues.csv").read_text().startswith("index,slowness,second_moment,corr_x,corr_y")


def test_training_knobs_reach_the_trainer():
    from spinet.cli import Setup, train_config

    cfg = resolve("hydrogen", {"schedule": "annealed", "anneal_steps": 7, "input_scale": 1.0, "halfwidth": 4.0})
    tcfg = train_config(cfg)
    assert tcfg.schedule == "annealed" and tcfg.anneal_steps == 7
    assert Setup(cfg).net.spec.input_scale == 1.0
    assert Setup(resolve("hydrogen", {"halfwidth": 4.0})).net.spec.input_scale == 0.25
    with pytest.raises(ConfigError):
        resolve("hydrogen", {"input_scale": -1.0})
