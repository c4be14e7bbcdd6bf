import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from predfilter.errors import (
    BadMagic,
    DimensionMismatch,
    FormatError,
    ManifestError,
    MissingInput,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedMaxval,
    UnsupportedVersion,
)
from predfilter.tensor_io import (
    decode_label_map,
    decode_logits,
    load_manifest,
    load_record,
    presence_from_label_map,
    read_label_map,
    read_logits,
    write_label_map,
    write_logits,
    write_manifest,
)


def sflt(k, h, w, values, magic=b"SFLT", version=1):
    return struct.pack("<4sIIII", magic, version, k, h, w) + struct.pack(f"<{len(values)}f", *values)


class TestLogits:
    def test_decode_small(self):
        arr = decode_logits(sflt(2, 1, 1, [0.5, -0.25]))
        assert arr.shape == (2, 1, 1)
        assert arr.dtype == np.float32
        assert arr.ravel().tolist() == [0.5, -0.25]

    def test_bad_magic(self):
        with pytest.raises(BadMagic, match="offset 0"):
            decode_logits(sflt(2, 1, 1, [0.0, 0.0], magic=b"XXXX"))

    def test_bad_version(self):
        with pytest.raises(UnsupportedVersion):
            decode_logits(sflt(2, 1, 1, [0.0, 0.0], version=2))

    @pytest.mark.parametrize("cut", [2, 12, 20, 27])
    def test_truncated(self, cut):
        buf = sflt(2, 1, 1, [1.0, 2.0])
        with pytest.raises(TruncatedPayload):
            decode_logits(buf[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_logits(sflt(2, 1, 1, [1.0, 2.0]) + b"\0")

    def test_nonfinite_reports_offset(self):
        buf = sflt(3, 1, 1, [1.0, float("nan"), 0.0])
        with pytest.raises(NonFiniteValue, match="byte offset 24"):
            decode_logits(buf)
        with pytest.raises(NonFiniteValue):
            decode_logits(sflt(2, 1, 1, [float("inf"), 0.0]))

    def test_write_zero(self, tmp_path):
        p = tmp_path / "z.sflt"
        write_logits(np.zeros((1, 1, 1), np.float32), p)
        data = p.read_bytes()
        assert len(data) == 24
        assert data[:20] == b"SFLT" + struct.pack("<IIII", 1, 1, 1, 1)
        assert data[20:] == b"\x00\x00\x00\x00"

    def test_layout_class_major(self, tmp_path):
        arr = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
        p = tmp_path / "a.sflt"
        write_logits(arr, p)
        payload = np.frombuffer(p.read_bytes()[20:], "<f4")
        # index = (c * H + h) * W + w
        assert payload[(1 * 2 + 1) * 3 + 2] == arr[1, 1, 2]

    def test_roundtrip_3x4x4(self, tmp_path):
        for seed in range(5):
            arr = np.random.default_rng(seed).normal(size=(3, 4, 4)).astype(np.float32)
            p = tmp_path / f"{seed}.sflt"
            write_logits(arr, p)
            back = read_logits(p)
            assert back.tobytes() == arr.tobytes()

    def test_write_refuses_nonfinite(self, tmp_path):
        with pytest.raises(NonFiniteValue):
            write_logits(np.array([[[np.nan]], [[0.0]]], np.float32), tmp_path / "x.sflt")

    def test_write_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            write_logits(np.zeros((2, 1, 1), np.float32), blocker / "x.sflt")

    def test_read_error_names_path(self, tmp_path):
        p = tmp_path / "bad.sflt"
        p.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(BadMagic, match="bad.sflt"):
            read_logits(p)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(
        np.float32,
        st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
        elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
    ))
    def test_roundtrip_property(self, tmp_path_factory, arr):
        p = tmp_path_factory.mktemp("rt") / "v.sflt"
        write_logits(arr, p)
        back = read_logits(p)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()  # bit-exact, including -0.0


class TestLabelMap:
    def test_encoding(self, tmp_path):
        m = np.array([[0, 1], [255, 2]], np.uint8)
        p = tmp_path / "m.pgm"
        write_label_map(m, p)
        data = p.read_bytes()
        assert data == b"P5\n2 2\n255\n" + bytes([0x00, 0x01, 0xFF, 0x02])
        assert np.array_equal(read_label_map(p), m)

    def test_maxval(self):
        with pytest.raises(UnsupportedMaxval):
            decode_label_map(b"P5\n1 1\n65535\n\0\0")

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            decode_label_map(b"P2\n1 1\n255\n0\n")

    def test_size_mismatch(self):
        with pytest.raises(TruncatedPayload):
            decode_label_map(b"P5\n2 2\n255\n\0\0\0")
        with pytest.raises(FormatError):
            decode_label_map(b"P5\n1 1\n255\n\0\0")

    def test_header_comments(self):
        m = decode_label_map(b"P5\n# made by hand\n3 1\n255\n\x01\x02\x03")
        assert m.tolist() == [[1, 2, 3]]

    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(100):
            h, w = rng.integers(1, 20, size=2)
            m = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
            p = tmp_path / f"{i}.pgm"
            write_label_map(m, p)
            assert read_label_map(p).tobytes() == m.tobytes()
            assert read_label_map(p).shape == m.shape


@pytest.mark.parametrize("labels, expected", [
    ([[0, 1], [255, 2]], {1, 2}),
    ([[0, 0], [0, 0]], set()),
    ([[255, 255]], set()),
])
def test_presence(labels, expected):
    assert presence_from_label_map(np.array(labels, np.uint8), 0) == expected


class TestManifest:
    def _dataset(self, tmp_path, logits_shape=(3, 10, 10), gt_shape=(10, 10), **extra):
        write_logits(np.zeros(logits_shape, np.float32), tmp_path / "a.sflt")
        write_label_map(np.zeros(gt_shape, np.uint8), tmp_path / "a.pgm")
        rec = {"image_id": "a", "logits_path": "a.sflt", "gt_path": "a.pgm", **extra}
        doc = {"num_classes": 3, "background_class": 0, "records": [rec]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        return tmp_path / "m.json"

    def test_relative_paths(self, tmp_path):
        m = load_manifest(self._dataset(tmp_path, classifier_scores=[1.0, -1.0], presence=[1]))
        rec = m.records[0]
        assert rec.logits_path == tmp_path / "a.sflt"
        assert rec.presence == {1}
        loaded = load_record(m, rec)
        assert loaded.logits.shape == (3, 10, 10)

    def test_dimension_mismatch_names_record(self, tmp_path):
        m = load_manifest(self._dataset(tmp_path, logits_shape=(3, 10, 11)))
        with pytest.raises(DimensionMismatch, match="record 'a'"):
            load_record(m, m.records[0])

    def test_class_count_mismatch(self, tmp_path):
        m = load_manifest(self._dataset(tmp_path, logits_shape=(4, 10, 10)))
        with pytest.raises(DimensionMismatch):
            load_record(m, m.records[0])

    def test_missing_file(self, tmp_path):
        path = self._dataset(tmp_path)
        (tmp_path / "a.pgm").unlink()
        with pytest.raises(ManifestError, match="gt_path"):
            load_manifest(path)

    def test_score_count(self, tmp_path):
        with pytest.raises(ManifestError, match="foreground"):
            load_manifest(self._dataset(tmp_path, classifier_scores=[1.0]))

    def test_duplicate_ids(self, tmp_path):
        path = self._dataset(tmp_path)
        doc = json.loads(path.read_text())
        doc["records"].append(dict(doc["records"][0]))
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_bad_presence(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(self._dataset(tmp_path, presence=[0]))

    def test_need_reports_missing(self, tmp_path):
        m = load_manifest(self._dataset(tmp_path))
        with pytest.raises(MissingInput, match="classifier_scores"):
            load_record(m, m.records[0], need=("scores",))

    def test_label_out_of_range(self, tmp_path):
        path = self._dataset(tmp_path)
        write_label_map(np.full((10, 10), 7, np.uint8), tmp_path / "a.pgm")
        m = load_manifest(path)
        with pytest.raises(FormatError, match="record 'a'"):
            load_record(m, m.records[0])

    def test_write_roundtrip(self, tmp_path):
        m = load_manifest(self._dataset(tmp_path, classifier_scores=[0.25, -3.0], presence=[2, 1]))
        out = tmp_path / "copy.json"
        write_manifest(m, out)
        again = load_manifest(out)
        assert again.records[0].logits_path == m.records[0].logits_path
        assert again.records[0].classifier_scores.tolist() == [0.25, -3.0]
        assert json.loads(out.read_text())["records"][0]["presence"] == [1, 2]
