import pytest

from pcformer.config import ConfigError, dump_config, parse_config
from pcformer.model import ModelConfig
from pcformer.training import TrainConfig


def test_parse_values_and_comments():
    m, t = parse_config("""
# a comment
width = 48   # trailing comment
head_hidden = 16, 8
boundary_radius = none
head_zero_init = false
lr = 2e-4
""")
    assert m.width == 48 and m.head_hidden == (16, 8) and m.boundary_radius is None
    assert m.head_zero_init is False and t.lr == 2e-4
    assert t.window == TrainConfig().window


def test_roundtrip_dump_parse():
    m = ModelConfig(width=48, enc_heads=4, head_hidden=(7,), rope_scale=0.25)
    t = TrainConfig(window=3, lambda_phys=0.5)
    text = dump_config(m, t)
    m2, t2 = parse_config(text)
    assert m2 == m and t2 == t
    assert dump_config(m2, t2) == text


def test_float_tuple_fields_roundtrip():
    m = ModelConfig(attr_dim=2, attr_shift=(1.0, 0.3), attr_scale=(1.0, 0.0625))
    m2, _ = parse_config(dump_config(m))
    assert m2.attr_shift == (1.0, 0.3) and m2.attr_scale == (1.0, 0.0625)


@pytest.mark.parametrize("text,line", [
    ("width = 16\nnot_a_key = 3\n", 2),
    ("\n\nwidth = sixteen\n", 3),
    ("width 16\n", 1),
    ("head_zero_init = maybe\n", 1),
])
def test_errors_report_line_numbers(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "cfg.txt")
    assert err.value.line == line
    assert f"cfg.txt:{line}:" in str(err.value)


def test_semantic_errors_become_config_errors():
    with pytest.raises(ConfigError):
        parse_config("width = 30\n")  # not divisible by the default head count
    with pytest.raises(ConfigError):
        parse_config("window = 1\n")
