import pytest
import torch

from semcom.checkpoint import FORMAT_VERSION, load_checkpoint, read_checkpoint, save_checkpoint
from semcom.codec import CodecConfig
from semcom.config import OUTPUT_ROOT_ENV, ExperimentConfig, load_config, save_config
from semcom.denoiser import DenoiserConfig
from semcom.errors import CheckpointError, ConfigError, MissingInputError
from semcom.pipeline import SemComSystem, collection_hashes
from semcom.training import TRAIN_SNR_SET


def test_defaults_carry_reference_training_settings():
    cfg = ExperimentConfig()
    assert cfg.phase1.snr_schedule == 13.0
    assert cfg.phase2.snr_schedule == TRAIN_SNR_SET == cfg.phase3.snr_schedule
    assert cfg.phase2.alpha == 1.0
    assert cfg.denoiser.t_max == 3
    assert cfg.codec.target_rho == "1/16"


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.codec.embed_dims = [8, 16, 24]
    cfg.phase2.iterations = 7
    cfg.eval.snr_list = [-3.0, 12.0]
    path = save_config(cfg, str(tmp_path / "a.yaml"))
    loaded = load_config(path)
    assert loaded.to_dict() == cfg.to_dict()
    save_config(loaded, str(tmp_path / "b.yaml"))
    assert (tmp_path / "a.yaml").read_text() == (tmp_path / "b.yaml").read_text()


def test_partial_config_merges_with_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("phase1:\n  iterations: 5\noutput_dir: out\n")
    cfg = load_config(str(path))
    assert cfg.phase1.iterations == 5
    assert cfg.phase1.snr_schedule == 13.0
    assert cfg.output_dir == "out"


@pytest.mark.parametrize("text", ["bogus: 1\n", "phase1:\n  lr: 1\n", "phase1: [1, 2\n", "- 1\n",
                                  "denoiser:\n  t_max: 0\n"])
def test_bad_configs_raise(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.yaml"))


def test_output_root_override(monkeypatch, tmp_path):
    cfg = ExperimentConfig(output_dir="runs/x")
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert cfg.resolved_output_dir() == "runs/x"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.resolved_output_dir() == str(tmp_path / "runs/x")
    assert ExperimentConfig(output_dir="/abs").resolved_output_dir() == "/abs"


def small_cfg():
    cfg = ExperimentConfig()
    cfg.codec = CodecConfig(stages=1, blocks_per_stage=[1, 1], embed_dims=[4, 4], head_filters=2, target_rho=None)
    cfg.denoiser = DenoiserConfig(base_channels=4, similarity_hidden=4)
    cfg.data.crop_size = 8
    return cfg


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg()
    torch.manual_seed(0)
    system = SemComSystem(cfg.codec, cfg.denoiser, image_size=(8, 8))
    path = save_checkpoint(str(tmp_path / "c.pt"), system, cfg, phase=2, seeds={"phase2": {"seed": 2}})
    loaded, cfg2, payload = load_checkpoint(path)
    assert payload["format_version"] == FORMAT_VERSION
    assert payload["seeds"] == {"phase2": {"seed": 2}}
    assert cfg2.to_dict() == cfg.to_dict()
    assert collection_hashes(loaded) == collection_hashes(system) == payload["hashes"]
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(loaded.reconstruct(x), system.reconstruct(x))


def test_checkpoint_without_denoiser(tmp_path):
    cfg = small_cfg()
    system = SemComSystem(cfg.codec, None, image_size=(8, 8))
    loaded, _, payload = load_checkpoint(save_checkpoint(str(tmp_path / "p1.pt"), system, cfg, phase=1))
    assert loaded.denoiser is None
    assert payload["params"]["residual"] is None


def test_checkpoint_errors(tmp_path):
    cfg = small_cfg()
    system = SemComSystem(cfg.codec, None, image_size=(8, 8))
    path = str(tmp_path / "c.pt")
    save_checkpoint(path, system, cfg, phase=1)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = FORMAT_VERSION + 1
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)
    torch.save({"something": 1}, path)
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    with pytest.raises(MissingInputError):
        read_checkpoint(str(tmp_path / "absent.pt"))


def test_checkpoint_config_mismatch(tmp_path):
    cfg = small_cfg()
    system = SemComSystem(cfg.codec, None, image_size=(8, 8))
    path = str(tmp_path / "c.pt")
    save_checkpoint(path, system, cfg, phase=1)
    payload = torch.load(path, weights_only=False)
    payload["config"]["codec"]["embed_dims"] = [6, 6]
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
