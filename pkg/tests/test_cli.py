import json

import numpy as np
import pytest

from seatlab import cli, data
from seatlab.config import ConfigError, RunConfig, load_config, parse_overrides


def write_toy_mnist(directory, n_train=80, n_test=20, seed=0):
    rng = np.random.default_rng(seed)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        y = rng.integers(0, 10, n).astype(np.uint8)
        x = rng.integers(0, 80, (n, 8, 8)).astype(np.uint8)
        x[np.arange(n), y % 8, :] = 255  # a bright row per class keeps the task learnable
        data.write_idx(directory / f"{prefix}-images-idx3-ubyte.gz", x)
        data.write_idx(directory / f"{prefix}-labels-idx1-ubyte.gz", y)


TOY_CONFIG = """
[model]
channels = [2]
hidden = [4]
input_shape = [1, 8, 8]

[train]
method = "SEAT"
epochs = 2
batch_size = 16
lr = 0.05
eps = 0.1
val_size = 16
val_steps = 2

[attack]
eps = 0.1
steps = 2
alpha = 0.05

[data]
path = "{data}"

[output]
directory = "{out}"
seed = 3
"""


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "mnist").mkdir()
    write_toy_mnist(root / "mnist")
    cfg_path = root / "run.toml"
    cfg_path.write_text(TOY_CONFIG.format(data=root / "mnist", out=root / "runs"))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return root, cfg_path


def run_dir_of(cfg_path, *overrides):
    return cli.run_dir(load_config(cfg_path, parse_overrides(list(overrides))))


# -- configuration ---------------------------------------------------------------------------

def test_defaults():
    cfg = load_config()
    assert cfg.train.eps == pytest.approx(8 / 255)
    assert cfg.train.step_size == pytest.approx(1.25 * 8 / 255)
    assert (cfg.train.lam, cfg.train.epochs, cfg.train.batch_size) == (0.5, 30, 128)
    assert (cfg.train.momentum, cfg.train.weight_decay) == (0.9, 5e-4)
    assert cfg.attack.family == "pgd" and cfg.attack.steps == 20
    assert cfg.model.channels == (16, 32) and cfg.model.hidden == (128,)


def test_empty_train_section_gives_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\n")
    assert load_config(p).train == RunConfig().train


def test_command_line_overrides_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nlambda = 0.1\nmethod = 'FGSM_AT'\n")
    assert load_config(p).train.lam == 0.1
    assert load_config(p).train.method == "fgsm_at"
    assert load_config(p, parse_overrides(["--train.lambda", "0.3"])).train.lam == 0.3
    assert load_config(p, parse_overrides(["--train.lam=0.4"])).train.lam == 0.4


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="valid keys: .*lambda"):
        load_config(None, {"train": {"lamda": 0.3}})
    with pytest.raises(ConfigError, match="expected an integer"):
        load_config(None, parse_overrides(["--train.epochs", "many"]))
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(None, {"optim": {"lr": 1}})
    with pytest.raises(ConfigError, match="needs a value"):
        parse_overrides(["--train.lr"])
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError, match="method"):
        load_config(None, {"train": {"method": "free"}})


def test_digest_ignores_output_directory():
    a = load_config(None, {"output": {"directory": "x"}})
    b = load_config(None, {"output": {"directory": "y"}})
    c = load_config(None, {"train": {"lam": 0.2}})
    assert a.digest() == b.digest() != c.digest()
    assert a.train_digest() == b.train_digest() != c.train_digest()


def test_cifar_input_shape_follows_dataset():
    assert load_config(None, {"data": {"dataset": "cifar10"}}).model.input_shape == (3, 32, 32)


def test_defaults_command(capsys, tmp_path):
    assert cli.main(["defaults"]) == 0
    out = capsys.readouterr().out
    assert "[train]" in out and "lambda = 0.5" in out
    (tmp_path / "d.toml").write_text(out)
    assert load_config(tmp_path / "d.toml") == RunConfig()


# -- commands -----------------------------------------------------------------------------------

def test_train_artifacts(toy):
    _, cfg_path = toy
    out = run_dir_of(cfg_path)
    digest = load_config(cfg_path).train_digest()
    assert out.name == f"run-{digest}"
    for name in ("metrics.csv", "final.ckpt", "batch_log.csv", f"manifest-train-{digest}.json"):
        assert (out / name).exists(), name
    assert data.load_checkpoint(out / "final.ckpt").config_digest == digest
    assert len(data.read_metrics(out / "metrics.csv")) == 2
    manifest = json.loads((out / f"manifest-train-{digest}.json").read_text())
    assert set(manifest["artifacts"]) >= {"metrics.csv", "final.ckpt"}


def test_retraining_reproduces_bytes(toy, tmp_path):
    root, cfg_path = toy
    assert cli.main(["train", "--config", str(cfg_path),
                     f"--output.directory={tmp_path}"]) == 0
    a, b = run_dir_of(cfg_path), run_dir_of(cfg_path, f"--output.directory={tmp_path}")
    assert a.name == b.name
    for name in ("metrics.csv", "final.ckpt", "batch_log.csv", "checkpoints/epoch001.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ma = json.loads(next(a.glob("manifest-train-*.json")).read_text())
    mb = json.loads(next(b.glob("manifest-train-*.json")).read_text())
    for m in (ma, mb):
        m.pop("timings")
        m["config"]["output"].pop("directory")
    assert ma == mb


def test_eval_at_zero_eps_prints_ra_equal_sa(toy, capsys):
    _, cfg_path = toy
    assert cli.main(["eval", "--config", str(cfg_path), "--attack.eps", "0"]) == 0
    out = capsys.readouterr().out
    vals = dict(tok.split("=") for tok in out.split())
    assert vals["RA"] == vals["SA"]


def test_eval_battery(toy):
    _, cfg_path = toy
    assert cli.main(["eval", "--config", str(cfg_path), "--battery",
                     "--attack.steps", "2"]) == 0
    path = next(run_dir_of(cfg_path).glob("eval-*.json"))
    res = json.loads(path.read_text())
    assert {"sa", "ra", "fgsm", "pgd20", "pgd50x10", "config_digest"} <= set(res)


@pytest.mark.parametrize("argv,stem", [
    (["landscape", "--resolution", "3"], "landscape"),
    (["boundary", "--resolution", "3", "--samples", "5"], "boundary"),
    (["weightscape", "--resolution", "3", "--samples", "5"], "weightscape"),
    (["lipschitz", "--steps", "2", "--samples", "5"], "lipschitz"),
    (["xi", "--samples", "10"], "xi"),
])
def test_diagnostic_commands_write_digested_artifacts(toy, argv, stem):
    _, cfg_path = toy
    argv = argv[:1] + ["--config", str(cfg_path)] + argv[1:]
    assert cli.main(argv) == 0
    cfg = load_config(cfg_path)
    files = list(run_dir_of(cfg_path).glob(f"{stem}-*"))
    assert files
    digests = {f.stem.split("-", 1)[1] for f in files}
    assert all(len(d) == 12 for d in digests)
    man = list(run_dir_of(cfg_path).glob(f"manifest-{stem}-*.json"))
    assert {m.stem.split("-")[-1] for m in man} == digests
    assert cfg.train_digest() not in digests  # command digests include the command options


def test_grid_roundtrip(toy):
    _, cfg_path = toy
    path = next(run_dir_of(cfg_path).glob("landscape-*.csv"))
    grid = cli.read_grid(path)
    assert grid.values.shape == (3, 3) and grid.kind == "input_loss"
    assert grid.meta["config_digest"] == path.stem.split("-", 1)[1]


def test_lambda_sweep_schema(toy, capsys):
    root, cfg_path = toy
    argv = ["lambda-sweep", "0,0.1,0.3,0.5", "--config", str(cfg_path), "--samples", "8",
            "--steps", "2", "--train.epochs", "1"]
    assert cli.main(argv) == 0
    path = next((root / "runs").glob("lambda_sweep-*.csv"))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    assert lines[1] == "lambda,lower,upper,sa,ra,gap"
    rows = [ln.split(",") for ln in lines[2:]]
    assert [float(r[0]) for r in rows] == [0.0, 0.1, 0.3, 0.5]
    assert all(float(r[1]) <= float(r[2]) for r in rows)
    # a second sweep reuses the four checkpoints
    capsys.readouterr()
    assert cli.main(argv) == 0
    assert "training lambda" not in capsys.readouterr().out


def test_errors_give_nonzero_exit(toy, tmp_path, capsys):
    _, cfg_path = toy
    assert cli.main(["eval", "--config", str(cfg_path), "--train.lamda", "1"]) == 1
    assert "valid keys" in capsys.readouterr().err
    assert cli.main(["train"]) == 1  # no data path
    assert "[data] path is required" in capsys.readouterr().err
    assert cli.main(["eval", "--config", str(cfg_path), "--checkpoint",
                     str(tmp_path / "none.ckpt")]) == 1
    assert cli.main(["landscape", "--config", str(cfg_path), "--index", "999"]) == 1
    assert cli.main(["lambda-sweep", "0,-1", "--config", str(cfg_path)]) == 1
    assert cli.main(["train", "--config", str(cfg_path), "--model.input_shape", "[1, 16, 16]",
                     "--model.channels", "[2]"]) == 1
    assert "input_shape" in capsys.readouterr().err


def test_no_margin_inner_flag(toy):
    _, cfg_path = toy
    cfg = load_config(cfg_path, {"train": {"inner_loss": "ce"}})
    argv = ["train", "--config", str(cfg_path), "--no-margin-inner", "--train.epochs", "1"]
    assert cli.main(argv) == 0
    final = cli.run_dir(cfg.with_("train", epochs=1)) / "final.ckpt"
    assert final.exists()
