import pytest

from advdetect.exceptions import ConfigError
from advdetect.schemas.attack import AttackName
from advdetect.schemas.experiment import (
    config_digest,
    load_config,
    parse_config,
    parse_pairs,
    render_config,
)
from advdetect.schemas.network import DatasetId


def test_dataset_defaults_fill_in():
    cfg = parse_config("dataset = mnist_digit\n")
    assert cfg.dataset == DatasetId.mnist_digit
    assert cfg.cnn_epochs == 10
    assert cfg.eps == [0.12, 0.30]
    assert cfg.closeness_eps == 0.2
    assert cfg.mc_samples == 50
    assert cfg.cap == 1000
    assert cfg.attacks == [AttackName.fgsm, AttackName.bim, AttackName.pgd, AttackName.deepfool, AttackName.cw]

    cifar = parse_config("dataset = cifar10")
    assert cifar.cnn_epochs == 50
    assert cifar.cnn_batch_size == 128
    assert cifar.eps == [0.02, 0.04]


def test_file_values_override_defaults():
    cfg = parse_config(
        """
        # desk-scale run
        dataset = mnist_fashion
        attacks = fgsm, cw   # two attacks only
        eps = 0.05
        mc-samples = 10
        """
    )
    assert cfg.attacks == [AttackName.fgsm, AttackName.cw]
    assert cfg.eps == [0.05]
    assert cfg.mc_samples == 10
    assert cfg.closeness_eps == 0.07


def test_render_roundtrip_and_digest():
    cfg = parse_config("dataset = mnist_digit\neps = 0.1, 0.3\nseed = 7\n")
    again = parse_config(render_config(cfg))
    assert again == cfg
    assert config_digest(again) == config_digest(cfg)
    assert config_digest(parse_config("dataset = mnist_digit\nseed = 8\n")) != config_digest(cfg)


def test_load_config_applies_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("dataset = mnist_digit\ncap = 500\n", encoding="utf-8")
    cfg = load_config(path, {"cap": "20", "out-dir": str(tmp_path / "out")})
    assert cfg.cap == 20
    assert cfg.out_path == tmp_path / "out"

    assert load_config(None, {"dataset": "cifar10"}).dataset == DatasetId.cifar10


@pytest.mark.parametrize(
    "text",
    [
        "dataset = mnist_digit\nbogus_key = 1\n",
        "dataset = svhn\n",
        "cap = 3\n",
        "dataset = mnist_digit\ncap = 0\n",
        "dataset = mnist_digit\neps = 0.1, -0.2\n",
        "dataset = mnist_digit\nattacks = fgsm, jsma\n",
        "dataset = mnist_digit\ncv_folds = 1\n",
        "dataset = mnist_digit\nthis line has no separator\n",
    ],
)
def test_invalid_configs_raise_config_error(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_parse_pairs_strips_comments_and_dashes():
    assert parse_pairs("  out-dir = runs/a  # where\n\n# only a comment\n") == {"out_dir": "runs/a"}


def test_hash_inside_a_value_is_kept():
    pairs = parse_pairs("data_dir = /data/run#3   # scratch copy\nout_dir=/tmp/a#b\n#seed = 4\n")
    assert pairs == {"data_dir": "/data/run#3", "out_dir": "/tmp/a#b"}
    cfg = parse_config("dataset = mnist_digit\nout_dir = runs/#7\n")
    assert str(cfg.out_path).endswith("#7")
