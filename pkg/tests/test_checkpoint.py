import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fitcls.checkpoint import MAGIC, Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from fitcls.corpus import FitLabel, Review, build_vocabulary
from fitcls.errors import (CheckpointStructureError, CheckpointTruncatedError, CheckpointVersionError,
                           InputError)

VOCAB = build_vocabulary([Review("0", "small small small fit fit", FitLabel.SMALL)])


def _ckpt(**arrays):
    arrays = arrays or {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.0])}
    return Checkpoint("test", arrays, VOCAB, {"lr": 0.1}, {"note": "x"})


@given(st.dictionaries(st.text("abc.", min_size=1, max_size=5),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
                       max_size=4))
def test_round_trip_is_bit_exact(arrs):
    ck = Checkpoint("k", arrs, VOCAB, {"a": [1, 2]}, {"m": 1})
    blob = save_checkpoint(ck)
    back = load_checkpoint(blob)
    assert list(back.arrays) == list(arrs)
    for k, v in arrs.items():
        assert back.arrays[k].shape == v.shape
        assert back.arrays[k].tobytes() == np.ascontiguousarray(v).tobytes()
    assert back.vocab == VOCAB and back.config == ck.config and back.meta == ck.meta
    assert save_checkpoint(back) == blob


def test_bad_magic_and_version():
    blob = bytearray(save_checkpoint(_ckpt()))
    with pytest.raises(CheckpointVersionError, match="magic"):
        load_checkpoint(b"XXXX" + bytes(blob[4:]))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(bytes(blob))


def test_truncation_names_the_array():
    blob = save_checkpoint(_ckpt())
    with pytest.raises(CheckpointTruncatedError, match="'b'"):
        load_checkpoint(blob[:-3])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(blob[:6])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(blob[:20])


def test_structure_errors():
    blob = save_checkpoint(_ckpt())
    with pytest.raises(CheckpointStructureError, match="trailing"):
        load_checkpoint(blob + b"\0" * 8)
    tampered = blob.replace(b'"shape":[2,3]', b'"shape":[3,3]')
    with pytest.raises(CheckpointStructureError, match="'w'"):
        load_checkpoint(tampered)
    tampered = blob.replace(b'"lr":0.1', b'"lr":0.2')
    with pytest.raises(CheckpointStructureError, match="config"):
        load_checkpoint(tampered)
    tampered = blob.replace(b'"small"', b'"smell"')
    with pytest.raises(CheckpointStructureError, match="vocab"):
        load_checkpoint(tampered)
    garbage = MAGIC + struct.pack("<II", 1, 4) + b"{{{{"
    with pytest.raises(CheckpointStructureError):
        load_checkpoint(garbage)


def test_file_helpers(tmp_path):
    path = tmp_path / "sub" / "m.fitc"
    write_checkpoint(path, _ckpt())
    assert read_checkpoint(path).arrays["w"][1, 2] == 5.0
    with pytest.raises(InputError):
        read_checkpoint(tmp_path / "missing.fitc")
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointTruncatedError, match=str(path)):
        read_checkpoint(path)
