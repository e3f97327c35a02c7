import pytest

from adaseg.config import RunConfig
from adaseg.interpret import InterpretMethod


def test_round_trip():
    cfg = RunConfig()
    cfg.update("ada", "method", "guided-gradcam")
    cfg.update("data", "spurious_context", "false")
    cfg.update("augment", "rotation", "-2.0, 2.0")
    cfg.update("run", "seed", 42)
    back = RunConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.ada.method is InterpretMethod.GUIDED_GRADCAM
    assert back.augment.rotation == (-2.0, 2.0)
    assert back.to_ini() == cfg.to_ini()


def test_write_and_load(tmp_path):
    cfg = RunConfig()
    cfg.update("unet", "base_channels", "4")
    cfg.write(tmp_path / "sub" / "c.ini")
    assert RunConfig.load(tmp_path / "sub" / "c.ini").unet.base_channels == 4


def test_order_is_recorded_and_fixed():
    text = RunConfig().to_ini()
    assert "order = rotate, shift, scale, elastic, channel_shift" in text
    with pytest.raises(ValueError, match="fixed"):
        RunConfig.from_ini(text.replace("rotate, shift", "shift, rotate"))


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[run]\nnope = 1\n", "[data]\nspurious_context = maybe\n",
                                  "[unet]\ndepth = three\n"])
def test_rejects_bad_input(text):
    with pytest.raises(ValueError):
        RunConfig.from_ini(text)
