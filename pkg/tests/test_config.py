import os
from pathlib import Path

import pytest
import xdg.BaseDirectory

from chainrules import config
from chainrules.config import ConfigError


def write(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def test_folder_follows_xdg(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(xdg.BaseDirectory, "xdg_config_home", str(tmp_path))
    assert config.folder() == os.path.join(str(tmp_path), "chainrules")
    assert config.user_config_path().endswith("chainrules.cfg")


def test_load_flat(tmp_path: Path) -> None:
    path = write(
        os.path.join(tmp_path, "a.cfg"),
        "# comment\nwindow-size = 3\nopen_ratio = 0.2  # inline\nLR=1e-3\n",
    )
    assert config.load_flat(path) == {
        "window_size": "3",
        "open_ratio": "0.2",
        "lr": "1e-3",
    }


def test_load_flat_rejects_garbage(tmp_path: Path) -> None:
    path = write(os.path.join(tmp_path, "a.cfg"), "this is not a setting\n")
    with pytest.raises(ConfigError):
        config.load_flat(path)


def test_precedence(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(xdg.BaseDirectory, "xdg_config_home", str(tmp_path))
    os.makedirs(config.folder())
    write(config.user_config_path(), "epochs = 5\ndim = 16\nseed = 1\n")
    given = write(os.path.join(tmp_path, "given.cfg"), "epochs = 7\nseed = 2\n")
    values = config.effective(given, {"seed": 3, "lr": None})
    assert values == {"epochs": "7", "dim": "16", "seed": "3"}
    assert config.effective(None, {}, use_user_config=False) == {}


def test_getters() -> None:
    values = {"a": "3", "b": "0.5", "c": "none", "d": "yes", "e": "x"}
    assert config.get_int(values, "a", 0) == 3
    assert config.get_int(values, "zz", 9) == 9
    assert config.get_float(values, "b", 0.0) == 0.5
    assert config.get_optional_int(values, "c", 4) is None
    assert config.get_optional_int(values, "a", None) == 3
    assert config.get_bool(values, "d", False) is True
    assert config.get_str(values, "e", "y") == "x"
    with pytest.raises(ConfigError):
        config.get_int(values, "e", 0)
    with pytest.raises(ConfigError):
        config.get_bool(values, "e", False)


def test_config_hash() -> None:
    a = config.config_hash({"x": "1", "y": "2"})
    assert a == config.config_hash({"y": "2", "x": "1"})
    assert a != config.config_hash({"x": "1", "y": "3"})
    assert len(a) == 12
