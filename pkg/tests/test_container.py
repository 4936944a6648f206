import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from calmpde import container
from calmpde.container import ContainerError, FormatError, PayloadSizeError, TruncatedError

MAGIC = b"TESTMG01"

named_arrays = st.dictionaries(
    st.text("abcdefgh/._", min_size=1, max_size=8),
    st.one_of(
        arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=5)),
        arrays(np.float64, array_shapes(min_dims=1, max_dims=2, max_side=5)),
        arrays(np.int64, array_shapes(min_dims=1, max_dims=2, max_side=4)),
    ),
    max_size=4,
)


@settings(max_examples=40, deadline=None)
@given(named_arrays, st.dictionaries(st.sampled_from(["a", "b", "note"]), st.integers() | st.text(max_size=5)))
def test_roundtrip_bit_exact(tmp_path_factory, arrs, meta):
    path = tmp_path_factory.mktemp("c") / "f.bin"
    size = container.write(path, MAGIC, meta, arrs)
    assert size == path.stat().st_size
    got_meta, got = container.read(path, MAGIC)
    assert got_meta == meta
    assert list(got) == list(arrs)
    for k, v in arrs.items():
        assert got[k].dtype == v.dtype and got[k].shape == v.shape
        assert got[k].tobytes() == v.tobytes()


def test_alignment(tmp_path):
    path = tmp_path / "f.bin"
    container.write(path, MAGIC, {}, {"x": np.arange(3, dtype=np.float32), "y": np.ones(5)})
    raw = path.read_bytes()
    jlen = int.from_bytes(raw[8:16], "little")
    assert len(raw) % 16 == 0
    assert len(raw) == container.expected_size(jlen, [12, 40])


@pytest.mark.parametrize("cut", [4, 12, 20, -1])
def test_truncation_is_typed(tmp_path, cut):
    path = tmp_path / "f.bin"
    container.write(path, MAGIC, {"k": 1}, {"x": np.arange(10.0)})
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises((TruncatedError, FormatError)):
        container.read(path, MAGIC)


def test_garbled_header_is_format_error(tmp_path):
    path = tmp_path / "f.bin"
    container.write(path, MAGIC, {"k": 1}, {"x": np.arange(10.0)})
    raw = bytearray(path.read_bytes())
    raw[16] = ord("#")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        container.read(path, MAGIC)


def test_shape_disagreement(tmp_path):
    path = tmp_path / "f.bin"
    container.write(path, MAGIC, {}, {"x": np.arange(4.0)})
    raw = path.read_bytes().replace(b'"shape": [4]', b'"shape": [5]')
    path.write_bytes(raw)
    with pytest.raises(PayloadSizeError):
        container.read(path, MAGIC)


def test_errors_share_base():
    for err in (FormatError, TruncatedError, PayloadSizeError, container.VersionError):
        assert issubclass(err, ContainerError) and issubclass(err, ValueError)
