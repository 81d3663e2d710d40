import pytest
import torch

from conftest import toy_model
from models.conv_dkm import LayerSpec
from models.skr import make_generator
from util.checkpoint import load_into, read_checkpoint, save_checkpoint
from util.config import resolve_config
from util.datasets import gen_toy_binary
from util.errors import FormatError, ShapeMismatch


@pytest.fixture
def trained_like():
    model = toy_model(seed=3)
    x, _ = gen_toy_binary(20, 0).tensors(model.dtype)
    model.initialise(x, make_generator(0))
    with torch.no_grad():
        model.head.mu.add_(0.25)
    return model


def test_round_trip(tmp_path, trained_like):
    config = resolve_config({"train.epochs": 7})
    path = str(tmp_path / "model.pt")
    save_checkpoint(path, trained_like, config, epoch=7, norm_stats=([0.5, 0.25], [1.0, 2.0]))

    payload = read_checkpoint(path)
    assert payload["epoch"] == 7
    assert payload["config"] == config
    assert payload["norm_stats"] == [[0.5, 0.25], [1.0, 2.0]]

    fresh = toy_model(seed=11)
    load_into(fresh, payload)
    for (name, expected), (_, actual) in zip(trained_like.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(expected, actual), name


def test_without_norm_stats(tmp_path, trained_like):
    path = str(tmp_path / "model.pt")
    save_checkpoint(path, trained_like, resolve_config({}), epoch=0)
    assert read_checkpoint(path)["norm_stats"] is None


def test_tampered_config_rejected(tmp_path, trained_like):
    path = str(tmp_path / "model.pt")
    save_checkpoint(path, trained_like, resolve_config({}), epoch=1)
    payload = torch.load(path, weights_only=False)
    payload["config"]["train.lr"] = 0.5
    torch.save(payload, path)
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_wrong_version_rejected(tmp_path, trained_like):
    path = str(tmp_path / "model.pt")
    save_checkpoint(path, trained_like, resolve_config({}), epoch=1)
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_foreign_files_rejected(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        read_checkpoint(str(garbage))

    other = tmp_path / "other.pt"
    torch.save({"weights": torch.zeros(3)}, str(other))
    with pytest.raises(FormatError):
        read_checkpoint(str(other))


def test_shape_mismatch(tmp_path, trained_like):
    path = str(tmp_path / "model.pt")
    save_checkpoint(path, trained_like, resolve_config({}), epoch=1)
    wider = toy_model(layers=(LayerSpec("fc", 9),))
    with pytest.raises(ShapeMismatch):
        load_into(wider, read_checkpoint(path))
