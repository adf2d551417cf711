import json

import numpy as np
import pytest

from gridvit.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from gridvit.errors import BadMagicError, FormatError, ShapeMismatchError, TruncatedError, VersionError
from gridvit.model import ModelConfig, forward_classify, init_params


@pytest.fixture
def saved(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, seed=8, std=0.1)
    path = tmp_path / "m.gvck"
    save_checkpoint(params, tiny_cfg, path)
    return path, params, tiny_cfg


def _split(raw):
    header, start = read_header(raw)
    return header, raw[:start], raw[start:]


def _rewrite(path, header, payload):
    path.write_bytes(MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def test_round_trip_bit_exact(saved):
    path, params, cfg = saved
    back, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_forward_identical_after_reload(saved, rng):
    path, params, cfg = saved
    back, cfg2 = load_checkpoint(path)
    x = rng.random(cfg.input_shape).astype(np.float32)
    assert forward_classify(x, params, cfg).tobytes() == forward_classify(x, back, cfg2).tobytes()


def test_late_fusion_round_trip(tmp_path):
    cfg = ModelConfig.for_mode("late", k=4, slice_h=8, slice_w=8, patch_size=8, embed_dim=8, layers=1, heads=2)
    p = init_params(cfg, seed=1)
    save_checkpoint(p, cfg, tmp_path / "l.gvck")
    back, cfg2 = load_checkpoint(tmp_path / "l.gvck")
    assert cfg2.fusion == "late" and all(back[k].tobytes() == p[k].tobytes() for k in p)


def test_header_layout(saved):
    path, params, cfg = saved
    raw = path.read_bytes()
    assert raw.startswith(b"GVCK1\n")
    header, head, payload = _split(raw)
    assert header["config"] == cfg.to_dict()
    entry = next(t for t in header["tensors"] if t["name"] == "head.w")
    n = int(np.prod(entry["shape"])) * 4
    np.testing.assert_array_equal(
        np.frombuffer(payload[entry["offset"]:entry["offset"] + n], "<f4").reshape(entry["shape"]),
        params["head.w"])


def test_truncated_tensor_is_named(saved):
    path, _, _ = saved
    raw = path.read_bytes()
    header, _, payload = _split(raw)
    last = max(header["tensors"], key=lambda t: t["offset"])
    path.write_bytes(raw[:-8])
    with pytest.raises(TruncatedError, match=last["name"].replace(".", r"\.")):
        load_checkpoint(path)


def test_config_claiming_wider_model_is_rejected(saved):
    path, _, _ = saved
    header, _, payload = _split(path.read_bytes())
    header["config"]["embed_dim"] = 32
    _rewrite(path, header, payload)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_missing_tensor_is_rejected(saved):
    path, _, _ = saved
    header, _, payload = _split(path.read_bytes())
    header["tensors"] = [t for t in header["tensors"] if t["name"] != "pos"]
    _rewrite(path, header, payload)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_bad_magic_and_version(saved):
    path, _, _ = saved
    raw = path.read_bytes()
    path.write_bytes(b"PK" + raw[2:])
    with pytest.raises(BadMagicError):
        load_checkpoint(path)
    path.write_bytes(b"GVCK2\n" + raw[len(MAGIC):])
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_error_classes_are_distinct():
    kinds = [BadMagicError, VersionError, ShapeMismatchError, TruncatedError]
    assert len(set(kinds)) == 4 and all(issubclass(k, FormatError) for k in kinds)
    for a in kinds:
        assert not any(issubclass(a, b) for b in kinds if b is not a)


def test_save_rejects_wrong_tensor_set(tmp_path, tiny_cfg):
    p = init_params(tiny_cfg)
    del p["head.b"]
    with pytest.raises(ShapeMismatchError):
        save_checkpoint(p, tiny_cfg, tmp_path / "x.gvck")


def test_save_is_byte_deterministic(tmp_path, tiny_cfg):
    p = init_params(tiny_cfg, seed=2)
    save_checkpoint(p, tiny_cfg, tmp_path / "a.gvck")
    save_checkpoint(dict(reversed(list(p.items()))), tiny_cfg, tmp_path / "b.gvck")
    assert (tmp_path / "a.gvck").read_bytes() == (tmp_path / "b.gvck").read_bytes()
