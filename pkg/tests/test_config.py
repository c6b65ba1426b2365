import pytest
from hypothesis import given, strategies as st

from mftd.config import ConfigError, RunConfig, format_config, load_config, parse_config


def test_defaults():
    c = RunConfig()
    assert (c.n_lf_seed, c.channels, c.n_max, c.n_mut_seed, c.n_mut, c.n_mut_interval) == \
        (100, 2, 100, 5, 10, 5)
    assert c.eps_hv == 1e-5 and c.n_vae == 256
    assert (c.vmax_min, c.vmax_max) == (0.2, 0.8)
    assert (c.h_min, c.h_max) == (0.01, 0.1)
    assert c.min_offspring == 100 and c.smooth_radius == c.filter_radius


def test_stress_mode_vmax_range():
    c = RunConfig(mode="stress")
    assert (c.vmax_min, c.vmax_max) == (0.2, 0.5)


def test_parse_types_comments_and_none():
    c = parse_config("""
        # desk run
        mode = stress      # trailing comment
        nx = 16
        eps_hv = 2e-4
        r_hv1 = 5.0
        r_hv2 = 0.5
        lf_max_iter = none
        out_dir = "runs/a"
    """)
    assert c.mode == "stress" and c.nx == 16 and c.eps_hv == 2e-4
    assert c.r_hv1 == 5.0 and c.lf_max_iter is None and c.out_dir == "runs/a"


def test_overrides_win(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 3\nout_dir = x\n")
    c = load_config(p, seed=9, out_dir=None)
    assert c.seed == 9 and c.out_dir == "x"


@pytest.mark.parametrize("text, match", [
    ("colour = red", "unknown key"),
    ("nx 16", "expected"),
    ("nx = 16\nnx = 8", "duplicate"),
    ("nx = sixteen", "cannot parse"),
    ("mode = fluid", "mode"),
    ("n_max = 0", "positive"),
    ("vmax_min = 0.6\nvmax_max = 0.3", "vmax"),
    ("h_min = 0.2\nh_max = 0.1", "h_min"),
    ("r_hv1 = 2.0", "both"),
])
def test_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@given(nx=st.integers(1, 128), seed=st.integers(0, 2**32), eps=st.floats(1e-9, 1.0),
       mode=st.sampled_from(["stiffness", "stress"]))
def test_format_round_trip(nx, seed, eps, mode):
    c = RunConfig(mode=mode, nx=nx, seed=seed, eps_hv=eps)
    assert parse_config(format_config(c)) == c
