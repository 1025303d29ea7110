import json

import numpy as np
import pytest

from atta.tensorfile import FormatError, load_arrays, save_arrays


@pytest.fixture
def saved(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2, 3], dtype=np.int32)}
    save_arrays(tmp_path / "t.json", arrays, {"note": "x"})
    return tmp_path / "t", arrays


def _edit_manifest(stem, fn):
    path = stem.with_suffix(".json")
    m = json.loads(path.read_text())
    fn(m)
    path.write_text(json.dumps(m))


def test_round_trip_bit_exact(saved):
    stem, arrays = saved
    loaded, meta = load_arrays(stem)
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert loaded[k].dtype == v.dtype
        assert loaded[k].tobytes() == v.tobytes()


def test_suffix_forms_equivalent(saved):
    stem, _ = saved
    a, _ = load_arrays(stem.with_suffix(".json"))
    b, _ = load_arrays(stem.with_suffix(".bin"))
    assert a.keys() == b.keys()


def test_truncated_blob(saved):
    stem, _ = saved
    blob = stem.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(FormatError) as err:
        load_arrays(stem)
    assert err.value.offset == 32


def test_shape_disagrees_with_byte_count(saved):
    stem, _ = saved
    _edit_manifest(stem, lambda m: m["tensors"][0].update(shape=[2, 4]))
    with pytest.raises(FormatError, match="needs 32 bytes") as err:
        load_arrays(stem)
    assert err.value.offset == 0


def test_noncontiguous_offsets(saved):
    stem, _ = saved
    _edit_manifest(stem, lambda m: m["tensors"][1].update(offset=28))
    with pytest.raises(FormatError, match="contiguous"):
        load_arrays(stem)


def test_trailing_bytes(saved):
    stem, _ = saved
    blob = stem.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes() + b"\0\0\0\0")
    _edit_manifest(stem, lambda m: m.update(blob_nbytes=m["blob_nbytes"] + 4))
    with pytest.raises(FormatError, match="trailing") as err:
        load_arrays(stem)
    assert err.value.offset == 36


def test_bad_json(saved):
    stem, _ = saved
    stem.with_suffix(".json").write_text("{not json")
    with pytest.raises(FormatError) as err:
        load_arrays(stem)
    assert err.value.offset == 1


def test_wrong_format_tag(saved):
    stem, _ = saved
    _edit_manifest(stem, lambda m: m.update(format="other"))
    with pytest.raises(FormatError):
        load_arrays(stem)


def test_unknown_dtype(saved):
    stem, _ = saved
    _edit_manifest(stem, lambda m: m["tensors"][0].update(dtype="<f8"))
    with pytest.raises(FormatError, match="dtype"):
        load_arrays(stem)


def test_no_tmp_files_left(saved):
    stem, _ = saved
    assert not list(stem.parent.glob("*.tmp"))
