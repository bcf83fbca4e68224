import struct

import numpy as np
import pytest

from nkf_aec.errors import ConfigError
from nkf_aec.nkf import ModelWeights, NkfConfig
from nkf_aec.weights_io import decode, encode, load_weights, save_weights, verify_manifest


@pytest.fixture
def weights():
    return ModelWeights.glorot(NkfConfig(), seed=3, output_scale=1.0)


def test_header_layout(weights):
    blob = encode(weights)
    assert blob[:4] == b"NKFW"
    assert struct.unpack_from("<II", blob, 4) == (1, 16)
    (nlen,) = struct.unpack_from("<H", blob, 12)
    assert blob[14:14 + nlen] == b"fc1.W"
    assert blob[14 + nlen] == 2
    assert struct.unpack_from("<II", blob, 15 + nlen) == (18, 9)
    re, im = struct.unpack_from("<ff", blob, 23 + nlen)
    assert re == np.float32(weights["fc1.W"][0, 0].real)
    assert im == np.float32(weights["fc1.W"][0, 0].imag)


def test_size_matches_parameter_count(weights):
    blob = encode(weights)
    header = 12 + sum(2 + len(n) + 1 + 4 * weights[n].ndim for n in weights)
    complex_entries = sum(v.size for v in weights.values())
    assert len(blob) == header + 8 * complex_entries


def test_round_trip(tmp_path, weights):
    path = tmp_path / "w.nkfw"
    save_weights(path, weights)
    back = load_weights(path)
    assert back.config.taps == 4
    for name, arr in weights.items():
        np.testing.assert_array_equal(back[name], arr.astype(np.complex64 if np.iscomplexobj(arr)
                                                             else np.float32))
        assert np.iscomplexobj(back[name]) == np.iscomplexobj(arr)
    assert encode(back) == encode(weights)


def test_manifest(tmp_path, weights):
    path = tmp_path / "w.nkfw"
    save_weights(path, weights)
    lines = (tmp_path / "w.nkfw.manifest").read_text().splitlines()
    assert len(lines) == 17
    assert lines[0].split()[:2] == ["fc1.W", "18x9"]
    assert lines[-1].startswith("file ")
    assert verify_manifest(path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert not verify_manifest(path)


@pytest.mark.parametrize("mutate", [
    lambda b: b"NKFX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b + b"\0",
    lambda b: b[:-3],
    lambda b: b[:10],
])
def test_corrupt_files_rejected(weights, mutate):
    with pytest.raises(ConfigError):
        decode(mutate(encode(weights)))


def test_small_tap_count_inferred(tmp_path):
    w = ModelWeights.glorot(NkfConfig(taps=2), seed=1)
    save_weights(tmp_path / "w.nkfw", w)
    assert load_weights(tmp_path / "w.nkfw").config.taps == 2
