import struct

import numpy as np
import pytest

from pyLoRAOver.exceptions import TensorFileError
from pyLoRAOver.tensor import DenseTensor
from pyLoRAOver.tensor_io import decode_tensor, encode_tensor, load_tensor, save_tensor


class TestEncoding:
    def test_header_layout(self):
        raw = encode_tensor(DenseTensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        assert raw[:4] == b'MPOT'
        assert struct.unpack_from('<II', raw, 4) == (1, 2)
        assert struct.unpack_from('<2Q', raw, 12) == (2, 3)
        assert len(raw) == 12 + 16 + 6 * 8
        assert struct.unpack_from('<6d', raw, 28) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)

    def test_decode_restores_dims_and_values(self, rng):
        t = DenseTensor(rng.normal(size=(2, 3, 4)))
        assert decode_tensor(encode_tensor(t)) == t

    def test_bad_magic(self):
        raw = b'XXXX' + encode_tensor(DenseTensor([1.0]))[4:]
        with pytest.raises(TensorFileError):
            decode_tensor(raw)

    def test_bad_version(self):
        raw = bytearray(encode_tensor(DenseTensor([1.0])))
        raw[4:8] = struct.pack('<I', 2)
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(raw))

    def test_truncated_payload(self):
        raw = encode_tensor(DenseTensor(np.ones((2, 2))))
        with pytest.raises(TensorFileError):
            decode_tensor(raw[:-8])


class TestFiles:
    def test_save_and_load(self, tmp_path, rng):
        t = DenseTensor(rng.normal(size=(5, 2)))
        save_tensor(t, tmp_path / 'sub' / 'w.mpot')
        assert load_tensor(tmp_path / 'sub' / 'w.mpot') == t

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileError):
            load_tensor(tmp_path / 'missing.mpot')
