import pytest

from wsi_fewshot.config import (
    SynthSlideConfig,
    build,
    coerce,
    config_key,
    load_config_file,
    merge_settings,
)
from wsi_fewshot.errors import ConfigError


def test_config_keys_follow_flag_names():
    assert config_key("--lambda") == "lam"
    assert config_key("window-size") == "window_size"
    assert config_key("cov") == "cov_spec"
    assert config_key("--classes") == "n_classes"


def test_load_config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("lambda: 50\nmax-iters: 10\n")
    assert load_config_file(path, {"lam", "max_iters"}) == {"lam": 50, "max_iters": 10}
    path.write_text("")
    assert load_config_file(path, {"lam"}) == {}


@pytest.mark.parametrize("text, match", [
    ("lambda: 1\nbeta: 2\n", "unknown config key"),
    ("- 1\n- 2\n", "mapping"),
    ("lambda: [1\n", "invalid YAML"),
])
def test_bad_config_files(tmp_path, text, match):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config_file(path, {"lam"})


def test_coerce():
    assert coerce("reps", "7", int) == 7
    assert coerce("priors", [0.5, "0.5"], float, many=True) == [0.5, 0.5]
    assert coerce("priors", "0.2 0.8", float, many=True) == [0.2, 0.8]
    assert coerce("rho", None, float) is None
    with pytest.raises(ConfigError, match="reps"):
        coerce("reps", "many", int)


def test_precedence():
    merged = merge_settings({"seed": 3}, {"seed": 2, "reps": 5}, {"seed": 0, "reps": 20, "dim": 32})
    assert merged == {"seed": 3, "reps": 5, "dim": 32}


def test_build_keeps_defaults_for_missing_values():
    cfg = build(SynthSlideConfig, {"rows": 4, "priors": [0.5, 0.5], "dim": None, "seed": 1})
    assert cfg.rows == 4
    assert cfg.priors == (0.5, 0.5)
    assert cfg.dim == SynthSlideConfig.dim
