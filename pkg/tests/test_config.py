import pytest

from flowmaplab.config import (config_hash, parse_config_text, resolve_config,
                               resolved_text)
from flowmaplab.errors import ConfigError
from flowmaplab.teachers import GaussianTeacher, GmmTeacher


def test_parse_basic():
    raw = parse_config_text("""
    # a comment
    domain = ring
    iters = 100   # trailing comment
    lr = 0.01
    """)
    assert raw == {"domain": "ring", "iters": "100", "lr": "0.01"}


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config_text("learning_rate = 3")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("lr = 1\nlr = 2")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("this is not a pair")


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="iters"):
        resolve_config({"iters": "a lot"})


def test_defaults_fill_in():
    cfg = resolve_config({})
    assert cfg["domain"] == "gaussian"
    assert cfg["iters"] == 20000
    tc = cfg.train_config()
    assert tc.lr == 1e-3 and tc.batch == 512


def test_resolved_text_is_canonical_and_hash_stable():
    a = resolve_config({"iters": "50"})
    b = resolve_config({"iters": "50", "lr": "0.001"})   # explicit default
    assert resolved_text(a) == resolved_text(b)
    assert config_hash(a) == config_hash(b)
    c = resolve_config({"iters": "51"})
    assert config_hash(a) != config_hash(c)


def test_build_teacher_domains():
    g = resolve_config({"domain": "gaussian", "gauss_c": "0.7", "dim": "3"})
    teacher = g.build_teacher()
    assert isinstance(teacher, GaussianTeacher)
    assert teacher.world.c == 0.7 and teacher.dim == 3

    r = resolve_config({"domain": "ring", "ring_k": "5"})
    teacher = r.build_teacher()
    assert isinstance(teacher, GmmTeacher)
    assert teacher.n_components == 5


def test_guidance_modes():
    cfg = resolve_config({"domain": "ring", "guidance": "autoguidance",
                          "lambda_max": "3.0"})
    teacher = cfg.build_teacher()
    spec = cfg.build_guidance(teacher)
    assert spec.mode == "autoguidance" and spec.weak is not None

    cfg = resolve_config({"domain": "ring", "guidance": "cfg", "lambda_max": "3.0"})
    teacher = cfg.build_teacher()
    assert teacher.labels is not None
    spec = cfg.build_guidance(teacher)
    assert spec.mode == "cfg" and spec.uncond is teacher
    assert cfg.conditional
    model = cfg.build_model()
    assert model.n_classes == 8


def test_guidance_requires_ring():
    with pytest.raises(ConfigError):
        resolve_config({"domain": "gaussian", "guidance": "autoguidance"})


def test_bundled_configs_resolve():
    import importlib.resources as res
    configs = res.files("flowmaplab") / "configs"
    names = sorted(p.name for p in configs.iterdir() if p.name.endswith(".cfg"))
    assert "gaussian_emd.cfg" in names
    for name in names:
        text = (configs / name).read_text()
        cfg = resolve_config(parse_config_text(text))
        assert cfg.train_config().iters > 0
