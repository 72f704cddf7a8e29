import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from permprune import checkpoint as ckpt
from permprune.config import default_config


def sample_bundle(rng):
    return ckpt.Bundle({"b0.attn.g0": rng.standard_normal((4, 4)), "b0.ffn.g0": rng.standard_normal((8, 8)),
                        "vec": rng.standard_normal(3)}, {"kind": "test", "n": 2})


def test_save_load_save_identical(tmp_path, rng):
    bundle = sample_bundle(rng)
    ckpt.save(bundle, tmp_path / "a")
    loaded = ckpt.load(tmp_path / "a.json")
    for k, v in bundle.arrays.items():
        assert np.array_equal(loaded.arrays[k], v)
    assert loaded.meta == bundle.meta
    ckpt.save(loaded, tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.dictionaries(st.text("abcxyz.", min_size=1, max_size=6),
                       arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(0, 4)), elements=finite),
                       max_size=4))
def test_encode_decode_bit_exact(arrs):
    body, manifest = ckpt.encode(ckpt.Bundle(arrs, {"x": 1}))
    back = ckpt.decode(body, manifest)
    assert list(back.arrays) == list(arrs)
    for k, v in arrs.items():
        assert back.arrays[k].tobytes() == v.tobytes()
    assert ckpt.encode(back) == (body, manifest)


def test_version_mismatch_rejected(rng):
    body, manifest = ckpt.encode(sample_bundle(rng))
    doc = json.loads(manifest)
    doc["format_version"] = 2
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.decode(body, json.dumps(doc).encode())
    bumped = body[:16] + (2).to_bytes(4, "little") + body[20:]
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(bumped, manifest)


def test_corruption_rejected(rng):
    body, manifest = ckpt.encode(sample_bundle(rng))
    flipped = bytearray(body)
    flipped[-1] ^= 1
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.decode(bytes(flipped), manifest)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"X" + body[1:], manifest)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(body[:8], manifest)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(body, b"{not json")


def test_non_finite_refused(rng):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.encode(ckpt.Bundle({"a": np.array([[np.nan]])}))


def test_missing_files(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(tmp_path / "nothing")


def test_training_checkpoint_contents(rng):
    cfg = default_config(5)
    params = {"b0.ffn.g0": rng.standard_normal((2, 2)), "b0.attn.g0": rng.standard_normal((2, 2))}
    bundle = ckpt.training_checkpoint(params, {"b0.attn": np.array([1, 0])}, cfg)
    assert list(bundle.arrays) == ["b0.attn.g0", "b0.ffn.g0"]
    assert bundle.meta["pattern"] == "2:4"
    assert bundle.meta["config_digest"] == cfg.digest()
    assert bundle.meta["perms"] == {"b0.attn": [1, 0]}


def test_atomic_write_leaves_no_temp(tmp_path):
    ckpt.atomic_write(tmp_path / "sub" / "f.txt", b"abc")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
