import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twohands.config import ConfigError, RunConfig, load, parse


def test_empty_text_gives_defaults():
    assert parse("") == RunConfig()
    assert parse("# only a comment\n\n   \n") == RunConfig()


def test_values_and_comments():
    cfg = parse("""
        seed = 7                     # top-level key
        output = 'runs/a#1'          # '#' inside quotes is kept
        weights.w_coll = 250
        solver.facing_cutoff = none
        solver.rejection_radii = 0.01
        scene.motion = crossing_hands
        oracle.depth_noise = false
        model.finger_radii = (0.01, 0.009, 0.009, 0.008, 0.007)
    """)
    assert cfg.seed == 7 and cfg.output == "runs/a#1"
    assert cfg.weights.w_coll == 250.0 and isinstance(cfg.weights.w_coll, float)
    assert cfg.solver.facing_cutoff is None
    assert cfg.solver.rejection_radii == (0.01,)
    assert cfg.scene.motion == "crossing_hands"
    assert cfg.oracle.depth_noise is False
    assert cfg.model.finger_radii[0] == 0.01


def test_serialize_round_trip():
    cfg = parse("weights.w_temp = 0\nablation.disable_coll = true\nsolver.facing_cutoff = none\n"
                "fit.init = gt\nmodel.palm_half_extent = (0.05, 0.05, 0.012)\n")
    text = cfg.serialize()
    again = parse(text)
    assert again == cfg
    assert again.serialize() == text


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e4, allow_nan=False), st.integers(1, 200), st.booleans(),
       st.sampled_from(["oracle", "closest_seg", "closest_noseg"]), st.integers(0, 2 ** 31))
def test_round_trip_property(w, iters, flag, mode, seed):
    cfg = parse(f"weights.w_plane = {w!r}\nsolver.max_iterations = {iters}\nfit.overlays = {str(flag).lower()}\n"
                f"ablation.correspondence = {mode}\nseed = {seed}\n")
    assert parse(cfg.serialize()) == cfg


@pytest.mark.parametrize("text, line, key", [
    ("seed = 1\nweights.w_col = 3\n", 2, "weights.w_col"),
    ("\n\nnosuch.key = 1\n", 3, "nosuch.key"),
    ("seed = 1\nseed = 2\n", 2, "seed"),
    ("solver.max_iterations = 2.5\n", 1, "solver.max_iterations"),
    ("weights.w_point = yes please\n", 1, "weights.w_point"),
    ("just some words\n", 1, None),
    ("seed = 1\nweights.w_point = -1\n", 2, "weights"),
    ("scene.motion = moonwalk\n", 1, "scene"),
    ("solver.max_iterations = none\n", 1, "solver.max_iterations"),
    ("fit.overlays = 1\n", 1, "fit.overlays"),
    ("model.finger_radii = (0.01,) * 5\n", 1, "model.finger_radii"),
])
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as err:
        parse(text)
    assert err.value.line == line
    assert err.value.key == key
    assert str(err.value).startswith(f"line {line}:")


def test_effective_weights_and_noise():
    cfg = parse("ablation.disable_coll = true\nablation.disable_temp = true\noracle.depth_noise = false\n")
    w = cfg.effective_weights()
    assert w.w_coll == 0 and w.w_temp == 0 and w.w_point == cfg.weights.w_point
    n = cfg.oracle_noise(5)
    assert n.depth is None and n.seed == 5 and n.color_sigma == 0.01


def test_load_with_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("weights.w_coll = 10\nseed = 3\n")
    cfg = load(path, ["seed=4", "scene.n_frames = 6"])
    assert cfg.weights.w_coll == 10 and cfg.seed == 4 and cfg.scene.n_frames == 6
    assert load(None) == RunConfig()
    with pytest.raises(ConfigError):
        load(path, ["seed"])
