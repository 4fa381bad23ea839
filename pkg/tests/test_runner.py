import json

import numpy as np
import pytest

from spatialctl.denoiser.dataset import save_png, to_image
from spatialctl.runner import (
    ConfigError,
    RunConfig,
    RunRecord,
    ddim_sample,
    expected_calls,
    generate,
    generate_from_latent,
    load_config,
    preset,
    run_trajectory,
)
from spatialctl.runner.config import parse_settings, read_ini
from spatialctl.runner.models import Recipe, weights_path
from spatialctl.runner.pipeline import restart_point
from spatialctl.scheduler import NoiseSchedule

S = NoiseSchedule()


@pytest.fixture(scope="module")
def pair():
    from spatialctl.denoiser import generate_dataset

    return generate_dataset(1, 32, seed=21, kinds=("edge",))[0]


# -- configuration -----------------------------------------------------------------------

def test_presets():
    assert preset("paper-default").injection.schedule == "constant"
    assert preset("synchronous").injection.schedule == "synchronous"
    off = preset("disabled")
    assert not off.injection.layers and not off.appearance.layers and off.restart.N == 0
    with pytest.raises(ConfigError):
        preset("fastest")


def test_ini_roundtrip(tmp_path):
    cfg = preset("paper-default").with_settings(["injection.tau=0.75", "appearance.window=0.1,0.3",
                                                 "run.clip_x0=none", "restart.N=2"])
    path = tmp_path / "run.ini"
    path.write_text(cfg.to_ini())
    back = RunConfig().with_overrides(read_ini(path))
    assert back == cfg
    assert load_config("paper-default", path) == cfg


def test_override_layering(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[injection]\ntau = 0.5\nC = 0.3\n")
    cfg = load_config("synchronous", path, ["injection.tau=0.9"])
    assert (cfg.injection.tau, cfg.injection.C, cfg.injection.schedule) == (0.9, 0.3, "synchronous")


@pytest.mark.parametrize("setting", [
    "injection.tau",  # no value
    "tau=0.5",  # no section
    "nowhere.tau=0.5",
    "injection.nonsense=1",
    "injection.tau=abc",
    "injection.tau=2.0",  # dataclass validation
    "condprep.enabled=maybe",
    "injection.layers=enc0",
])
def test_bad_settings(setting):
    with pytest.raises(ConfigError):
        load_config(settings=[setting])


def test_validate_paths(tmp_path):
    with pytest.raises(ConfigError):
        load_config(settings=[f"run.weights={tmp_path / 'missing.bin'}"])
    with pytest.raises(ConfigError):
        load_config(settings=[f"arp.fixtures={tmp_path / 'nope'}"])
    with pytest.raises(ConfigError):
        load_config(settings=["arp.client=carrier"])
    with pytest.raises(ConfigError):
        read_ini(tmp_path / "absent.ini")


def test_parse_settings_groups_sections():
    assert parse_settings(["a.b=1", "a.c=x=y", "d.e="]) == {"a": {"b": "1", "c": "x=y"}, "d": {"e": ""}}


def test_recipe_digest_tracks_recipe(tmp_path, monkeypatch):
    monkeypatch.setenv("SPATIALCTL_CACHE", str(tmp_path))
    assert weights_path().parent == tmp_path
    assert Recipe().digest() != Recipe(epochs=3).digest()


# -- call accounting -----------------------------------------------------------------------

def test_paper_default_call_count_by_hand():
    cfg = preset("paper-default")
    grid = S.timesteps(50)[:-1]
    assert cfg.restart.bounds(S) == (259, 397) and restart_point(cfg, S) == 260
    recurring = [t for t in grid if 500 <= t <= 900]
    main = len(grid) + len(recurring) * (cfg.restart.N_prime - 1)
    restart = cfg.restart.N * cfg.restart.S_steps
    appearance = len(grid)
    structure = 1  # constant schedule; restart cycles stay below the injection window
    assert (main, restart, appearance, structure) == (71, 15, 50, 1)
    assert expected_calls(cfg) == 137
    assert expected_calls(cfg, with_condition=False) == 136
    assert expected_calls(preset("disabled")) == 50


def test_paper_default_trajectory_audit(untrained, pair):
    cfg = preset("paper-default")
    traj = run_trajectory(untrained, pair.condition, pair.prompt, pair.prompt, cfg)
    assert traj.calls == expected_calls(cfg) == 137
    # 31 window steps, 21 of them recurring twice: 52 lookups
    assert traj.cache == {"misses": 1, "hits": 51}
    assert traj.restart_at == 260
    main = [s for s in traj.steps if s["phase"] == "main"]
    assert len(main) == 50 and sum(s["injected"] for s in main) == 31
    assert sum(s["repeats"] for s in main) == 71
    assert all(s["appearance"] for s in main)
    restart = [s for s in traj.steps if s["phase"] == "restart"]
    assert sum(s["event"] == "perturb" for s in restart) == 3
    assert sum(s["event"] == "step" for s in restart) == 15


@pytest.mark.parametrize("name,settings", [
    ("synchronous", []),
    ("paper-default", ["injection.tau=1.0"]),
    ("paper-default", ["restart.N=0"]),
    ("paper-default", ["restart.sigma_tmin=0.5", "restart.sigma_tmax=4.0", "injection.schedule=synchronous"]),
])
def test_closed_form_matches_counted_calls(untrained, pair, name, settings):
    cfg = preset(name).with_settings(settings + ["appearance.layers="])
    traj = run_trajectory(untrained, pair.condition, pair.prompt, pair.prompt, cfg)
    assert traj.calls == expected_calls(cfg)


def test_disabled_preset_equals_plain_sampler(active, pair):
    cfg = preset("disabled")
    traj = run_trajectory(active, pair.condition, pair.prompt, pair.prompt, cfg)
    plain = ddim_sample(active, pair.prompt, seed=0, clip_x0=cfg.run.clip_x0)
    assert traj.output.data.tobytes() == plain.data.tobytes()
    assert traj.calls == 50


# -- generation and records -------------------------------------------------------------------

def _quiet(cfg):
    return cfg.with_settings(["arp.client=echo"])


def test_generation_is_deterministic(active, pair):
    cfg = _quiet(preset("paper-default"))
    a = generate_from_latent(pair.condition, pair.prompt, cfg, active)
    b = generate_from_latent(pair.condition, pair.prompt, cfg, active)
    assert a.record.to_json(wall_clock=False) == b.record.to_json(wall_clock=False)
    for k in a.images:
        assert a.images[k].tobytes() == b.images[k].tobytes()
    c = generate_from_latent(pair.condition, pair.prompt, cfg.with_settings(["run.seed=1"]), active)
    assert not np.array_equal(a.output, c.output)


def test_generation_record_contents(active, pair):
    gen = generate_from_latent(pair.condition, pair.prompt, _quiet(preset("paper-default")), active)
    r = gen.record
    assert r.calls == r.expected_calls == 137
    assert r.prompt_app == pair.prompt  # echo client
    assert r.condprep["operation"] in ("dilate", "erode", "none")
    assert set(r.metrics) == {"struct_distance_to_condition", "dft_gap_to_condition", "pixel_l2_to_condition"}
    assert set(gen.images) == {"output", "appearance", "condition"}
    assert r.weights_sha256 == active.weights().checksum()


def test_missing_fixture_falls_back_to_prompt(active, pair):
    cfg = preset("paper-default").with_settings(["arp.client=mock", "restart.N=0", "appearance.layers="])
    gen = generate_from_latent(pair.condition, pair.prompt, cfg, active)
    assert gen.record.prompt_app == pair.prompt
    assert gen.record.arp["stage1"] == {}


def test_unconditional_generation(active):
    gen = generate_from_latent(None, "a red circle", preset("disabled"), active)
    assert gen.record.calls == 50 and gen.record.metrics == {} and gen.record.condition_sha256 is None


def test_generate_persists_run_directory(tmp_path, active, pair):
    cond = tmp_path / "cond.png"
    save_png(cond, to_image(pair.condition))
    cfg = _quiet(preset("disabled")).with_settings([f"run.output_dir={tmp_path / 'runs'}"])
    record = generate(cond, pair.prompt, cfg, denoiser=active)
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert {p.name for p in run_dir.iterdir()} == {"output.png", "condition.png", "record.json", "steps.csv",
                                                     "metrics.csv"}
    back = RunRecord.load(run_dir)
    assert back.to_json(wall_clock=False) == record.to_json(wall_clock=False)
    assert json.loads((run_dir / "record.json").read_text())["version"] == 1
    steps = (run_dir / "steps.csv").read_text().splitlines()
    assert steps[0] == "phase,event,t,t_prev,injected,appearance,repeats" and len(steps) == 51


def test_generate_rejects_wrong_size(tmp_path, active):
    cond = tmp_path / "big.png"
    save_png(cond, np.zeros((40, 40, 3)))
    with pytest.raises(ValueError):
        generate(cond, "x", preset("disabled"), tmp_path / "out", denoiser=active)
