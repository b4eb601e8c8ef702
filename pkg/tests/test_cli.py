import textwrap

import pytest

from ssbsn.cli import main
from ssbsn.config import ConfigError, load_config, parse_config
from ssbsn.data import read_ppm
from ssbsn.network import NetworkConfig, load_checkpoint
from ssbsn.training import substream_seed

CONFIG = """
[network]
channels = 4
m = {m}

[train]
patch_size = 60
batch_size = 2
lr = 1e-3
epochs = 1
lr_drop_factor = 1.0
seed = 3

[data]
count = 4
size = 64
period = 12
val_count = 1

[paths]
dataset = data
val_dataset = val
checkpoint_dir = ckpt
output_dir = out
image = val/noisy/img0000.ppm

[bench]
sizes = 24x24, 48x48
channels = 8
dhats = 4, 6
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "run.cfg").write_text(CONFIG.format(m=1))
    return tmp_path


def cfg_path(d):
    return str(d / "run.cfg")


def test_parse_defaults_and_seed_derivation():
    cfg = parse_config("[train]\nseed = 5\n")
    assert cfg.network == NetworkConfig(seed=substream_seed(5, "init"))
    assert cfg.pd.s_train == 5 and cfg.pd.s_test == 2
    assert cfg.seed == 5


@pytest.mark.parametrize("text", [
    "[train]\nlearning_rate = 1\n",
    "[nonsense]\nx = 1\n",
    "[network]\nseed = 4\n",
    "[network]\nchannels = five\n",
    "[network]\nuse_ss_attention = maybe\n",
    "[network]\nchannels = 5\n",
    "no section header\n",
])
def test_parse_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_parse_types_and_comments():
    cfg = parse_config(textwrap.dedent("""
        # comment
        [network]
        kernel_sizes = 3, 5   # trailing comment
        cosine_similarity = no
        [bench]
        sizes = 24x24, 48x36
    """))
    assert cfg.network.kernel_sizes == (3, 5)
    assert cfg.network.cosine_similarity is False
    assert cfg.bench.sizes == ((24, 24), (48, 36))


def test_paths_resolve_relative_to_config(run_dir):
    cfg = load_config(cfg_path(run_dir))
    assert cfg.paths.dataset == str(run_dir / "data")
    assert cfg.paths.checkpoint_path == run_dir / "ckpt" / "last.ssbsn"
    with pytest.raises(ConfigError):
        load_config(run_dir / "missing.cfg")


def test_missing_dataset_is_a_usage_error(run_dir, capsys):
    assert main(["train", "-c", cfg_path(run_dir)]) == 2
    assert str(run_dir / "data") in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.cfg").write_text("[train]\nbogus = 1\n")
    assert main(["train", "-c", str(tmp_path / "bad.cfg")]) == 2


def test_argparse_usage_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_end_to_end(run_dir, capsys):
    c = cfg_path(run_dir)
    assert main(["synth", "-c", c]) == 0
    assert len(list((run_dir / "data" / "noisy").glob("*.ppm"))) == 4
    assert main(["train", "-c", c]) == 0
    assert (run_dir / "ckpt" / "last.ssbsn").is_file()
    log = (run_dir / "out" / "metrics.log").read_text().splitlines()
    assert len(log) == 3  # two steps and one validation line
    _, state = load_checkpoint(run_dir / "ckpt" / "last.ssbsn")
    assert state["step"] == "2"

    capsys.readouterr()
    assert main(["denoise", "-c", c, "--in", str(run_dir / "val")]) == 0
    printed = capsys.readouterr().out
    assert "PSNR" in printed
    out = read_ppm(run_dir / "out" / "img0000.ppm")
    assert out.shape == (1, 3, 64, 64)

    odd = run_dir / "odd.ppm"
    odd.write_bytes(b"P6\n13 7\n255\n" + bytes(i % 256 for i in range(13 * 7 * 3)))
    assert main(["denoise", "-c", c, "--in", str(odd), "--ensemble", "--pd-test", "1"]) == 0
    assert read_ppm(run_dir / "out" / "odd.ppm").shape == (1, 3, 7, 13)

    capsys.readouterr()
    assert main(["attnmap", "-c", c, "--layer", "8", "--pixel", "5,9", "--topk", "3"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if not ln.startswith("overlay")]
    weights = [float(ln.split()[2]) for ln in lines]
    assert len(weights) == 3 and weights == sorted(weights, reverse=True)
    assert (run_dir / "out" / "attn_layer8_5_9.txt").is_file()
    assert main(["attnmap", "-c", c, "--layer", "0", "--pixel", "5,9"]) == 2
    assert main(["attnmap", "-c", c, "--layer", "8", "--pixel", "oops"]) == 2


def test_resume_continues_step_numbering(run_dir):
    c = cfg_path(run_dir)
    main(["synth", "-c", c])
    text = CONFIG.format(m=1).replace("epochs = 1", "epochs = 2")
    (run_dir / "run.cfg").write_text(text)
    assert main(["train", "-c", c]) == 0
    full = (run_dir / "out" / "metrics.log").read_text()
    first_steps = [ln.split(",")[0] for ln in full.splitlines() if ln.count(",") == 3]
    assert first_steps == ["0", "1", "2", "3"]
    # truncate the run after the first epoch and resume it
    (run_dir / "ckpt" / "last.ssbsn").write_bytes((run_dir / "ckpt" / "epoch000.ssbsn").read_bytes())
    assert main(["train", "-c", c, "--resume"]) == 0
    _, state = load_checkpoint(run_dir / "ckpt" / "last.ssbsn")
    assert state["step"] == "4"


def test_bench_writes_csv(run_dir, capsys):
    assert main(["bench", "-c", cfg_path(run_dir)]) == 0
    rows = (run_dir / "out" / "flops.csv").read_text().splitlines()
    assert rows[0] == "h,w,C,dhat,msa,ss,ratio"
    assert len(rows) == 1 + 2 * 1 * 2
    assert main(["bench", "-c", cfg_path(run_dir), "--dynamic"]) == 0


def test_bench_dynamic_flags_non_divisible_grid(tmp_path, capsys):
    (tmp_path / "b.cfg").write_text("[bench]\nsizes = 20x20\nchannels = 4\ndhats = 6\n"
                                    "[paths]\noutput_dir = out\n")
    assert main(["bench", "-c", str(tmp_path / "b.cfg"), "--dynamic"]) == 1
    assert "not countable" in capsys.readouterr().out


def test_verify_quick():
    assert main(["verify"]) == 0


def test_threads_env(run_dir, monkeypatch):
    monkeypatch.setenv("SSBSN_THREADS", "1")
    assert main(["bench", "-c", cfg_path(run_dir)]) == 0
