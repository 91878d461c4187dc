import pytest

from depthdiff.config import ConfigError, RunConfig, format_config, load_config, parse_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.ensemble == 10 and cfg.spacing == "trailing" and cfg.steps == 1
    assert cfg.skip_k == 200 and cfg.huber_c == 0.001 and cfg.ema_mu == 0.95
    assert cfg.ensemble_lambda == 0.02


def test_parse_typed_values_and_comments():
    cfg = parse_config("""
        # protocol knobs
        seed = 7
        steps = 4   # trailing comment
        overlap = 0.25
        zero_snr = false
        spacing = leading
    """)
    assert (cfg.seed, cfg.steps, cfg.overlap, cfg.zero_snr, cfg.spacing) == (7, 4, 0.25, False, "leading")


@pytest.mark.parametrize(
    "text, msg",
    [
        ("bogus = 1", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("seed 1", "key = value"),
        ("seed = one", "cannot parse"),
        ("zero_snr = yes", "true or false"),
    ],
)
def test_rejects(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_format_round_trip(tmp_path):
    cfg = RunConfig(seed=3, zero_snr=False, overlap=0.3, denoiser="net.bin")
    text = format_config(cfg)
    assert "zero_snr = false" in text
    p = tmp_path / "run.cfg"
    p.write_text(text)
    assert load_config(p) == cfg


def test_replace_ignores_none():
    cfg = RunConfig().replace(seed=None, steps=5)
    assert cfg.seed == 0 and cfg.steps == 5
