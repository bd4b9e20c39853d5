"""Binary format round trips, size bookkeeping, and error taxonomy."""
import io
import struct

import numpy as np
import pytest

from oodkit import (
    BadMagicError,
    EmbeddingSet,
    FormatError,
    HeaderFieldError,
    ModelHead,
    PayloadError,
    SizeMismatchError,
    TruncatedStreamError,
    generate_synthetic,
    read_eds,
    read_head,
    write_eds,
    write_head,
)


def eds_bytes(es):
    buf = io.BytesIO()
    write_eds(es, buf)
    return buf.getvalue()


def head_bytes(head):
    buf = io.BytesIO()
    write_head(head, buf)
    return buf.getvalue()


def random_set(rng, n=None, d=None, c=None, labels=True, groups=False):
    n = n or int(rng.integers(1, 40))
    d = d or int(rng.integers(1, 12))
    c = c or int(rng.integers(2, 8))
    return EmbeddingSet(
        features=rng.standard_normal((n, d)).astype(np.float32),
        logits=rng.standard_normal((n, c)).astype(np.float32),
        labels=rng.integers(0, c, n).astype(np.int32) if labels else None,
        groups=rng.integers(-5, 5, n).astype(np.int32) if groups else None,
    )


class TestSizeFormulas:
    def test_minimal_labeled_set_is_44_bytes(self):
        es = EmbeddingSet(
            features=[[1.0, 2.0]], logits=[[0.5, -0.5]], labels=[1]
        )
        assert write_eds(es, io.BytesIO()) == 44

    def test_head_2x3_is_48_bytes(self):
        head = ModelHead(weight=np.ones((2, 3)), bias=np.zeros(2))
        assert write_head(head, io.BytesIO()) == 48

    def test_general_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            es = random_set(
                rng,
                labels=bool(rng.integers(2)),
                groups=bool(rng.integers(2)),
            )
            expected = 24 + 4 * es.n * (es.d + es.c)
            expected += 4 * es.n * (es.labels is not None)
            expected += 4 * es.n * (es.groups is not None)
            assert write_eds(es, io.BytesIO()) == expected


class TestRoundTrip:
    def test_eds_property(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            es = random_set(
                rng,
                labels=bool(rng.integers(2)),
                groups=bool(rng.integers(2)),
            )
            blob = eds_bytes(es)
            back = read_eds(blob)
            assert back == es
            assert eds_bytes(back) == blob  # second pass is bit-identical

    def test_head_property(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            c = int(rng.integers(2, 9))
            d = int(rng.integers(1, 12))
            head = ModelHead(
                weight=rng.standard_normal((c, d)).astype(np.float32),
                bias=rng.standard_normal(c).astype(np.float32),
            )
            blob = head_bytes(head)
            back = read_head(blob)
            assert back == head
            assert head_bytes(back) == blob

    def test_float64_values_quantize_once(self):
        # values that are not exactly representable in binary32 settle after
        # one write/read; from then on round trips are lossless
        es = EmbeddingSet(features=[[0.1, 0.2]], logits=[[0.3, 0.7]])
        first = read_eds(eds_bytes(es))
        assert first.features[0, 0] == np.float64(np.float32(0.1))
        assert read_eds(eds_bytes(first)) == first

    def test_reader_accepts_paths_and_file_objects(self, tmp_path):
        rng = np.random.default_rng(3)
        es = random_set(rng)
        path = tmp_path / "x.eds"
        write_eds(es, path)
        assert read_eds(path) == es
        assert read_eds(str(path)) == es
        with open(path, "rb") as fh:
            assert read_eds(fh) == es


class TestReaderErrors:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.es = random_set(rng, n=3, d=2, c=2, labels=True)
        self.blob = eds_bytes(self.es)

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            read_eds(b"NOTMAGIC" + self.blob[8:])

    def test_every_truncation_is_typed(self):
        for cut in range(len(self.blob)):
            with pytest.raises((TruncatedStreamError, BadMagicError)):
                read_eds(self.blob[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(SizeMismatchError):
            read_eds(self.blob + b"\x00")

    def _with_header(self, n=None, d=None, c=None, flags=None, reserved=b"\x00\x00\x00"):
        old_n, old_d, old_c, old_flags = struct.unpack("<IIIB", self.blob[8:21])
        header = struct.pack(
            "<IIIB",
            old_n if n is None else n,
            old_d if d is None else d,
            old_c if c is None else c,
            old_flags if flags is None else flags,
        )
        return self.blob[:8] + header + reserved + self.blob[24:]

    def test_zero_counts_rejected(self):
        with pytest.raises(HeaderFieldError):
            read_eds(self._with_header(n=0))
        with pytest.raises(HeaderFieldError):
            read_eds(self._with_header(d=0))
        with pytest.raises(HeaderFieldError):
            read_eds(self._with_header(c=1))

    def test_unknown_flag_bits_rejected(self):
        with pytest.raises(HeaderFieldError):
            read_eds(self._with_header(flags=0x05))

    def test_reserved_bytes_must_be_zero(self):
        with pytest.raises(HeaderFieldError):
            read_eds(self._with_header(reserved=b"\x00\x01\x00"))

    def test_huge_declared_count_is_truncation_not_allocation(self):
        with pytest.raises(TruncatedStreamError):
            read_eds(self._with_header(n=2**31 - 1))

    def test_non_finite_payload(self):
        nan = struct.pack("<f", float("nan"))
        blob = self.blob[:24] + nan + self.blob[28:]
        with pytest.raises(PayloadError):
            read_eds(blob)
        inf = struct.pack("<f", float("inf"))
        offset = 24 + 4 * self.es.n * self.es.d  # first logit entry
        blob = self.blob[:offset] + inf + self.blob[offset + 4:]
        with pytest.raises(PayloadError):
            read_eds(blob)

    def test_negative_label(self):
        offset = 24 + 4 * self.es.n * (self.es.d + self.es.c)
        blob = self.blob[:offset] + struct.pack("<i", -1) + self.blob[offset + 4:]
        with pytest.raises(PayloadError):
            read_eds(blob)

    def test_head_errors(self):
        head = ModelHead(weight=np.ones((2, 3)), bias=np.zeros(2))
        blob = head_bytes(head)
        with pytest.raises(BadMagicError):
            read_head(b"XXXXXXXX" + blob[8:])
        with pytest.raises(TruncatedStreamError):
            read_head(blob[:-1])
        with pytest.raises(SizeMismatchError):
            read_head(blob + b"!")
        with pytest.raises(HeaderFieldError):
            read_head(blob[:8] + struct.pack("<II", 1, 3) + blob[16:])
        nan = struct.pack("<f", float("nan"))
        with pytest.raises(PayloadError):
            read_head(blob[:16] + nan + blob[20:])

    def test_all_errors_are_format_errors(self):
        for exc in (
            BadMagicError,
            TruncatedStreamError,
            SizeMismatchError,
            HeaderFieldError,
            PayloadError,
        ):
            assert issubclass(exc, FormatError)
            assert issubclass(exc, ValueError)


class TestContainers:
    def test_embedding_set_invariants(self):
        with pytest.raises(ValueError):
            EmbeddingSet(features=[[1.0]], logits=[[1.0]])  # c < 2
        with pytest.raises(ValueError):
            EmbeddingSet(features=[[1.0], [2.0]], logits=[[1.0, 2.0]])
        with pytest.raises(ValueError):
            EmbeddingSet(features=[[np.nan]], logits=[[1.0, 2.0]])
        with pytest.raises(ValueError):
            EmbeddingSet(features=[[1.0]], logits=[[1.0, np.inf]])
        with pytest.raises(ValueError):
            EmbeddingSet(
                features=[[1.0]], logits=[[1.0, 2.0]], labels=[-1]
            )
        with pytest.raises(ValueError):
            EmbeddingSet(
                features=np.empty((0, 3)), logits=np.empty((0, 2))
            )

    def test_arrays_are_frozen_copies(self):
        feats = np.ones((2, 2))
        es = EmbeddingSet(features=feats, logits=np.ones((2, 2)))
        feats[0, 0] = 5.0  # caller's array stays independent
        assert es.features[0, 0] == 1.0
        with pytest.raises(ValueError):
            es.features[0, 0] = 9.0

    def test_take_preserves_row_content(self):
        rng = np.random.default_rng(5)
        es = random_set(rng, n=10, labels=True, groups=True)
        sub = es.take([7, 2, 2])
        assert sub.n == 3
        assert np.array_equal(sub.features[1], es.features[2])
        assert sub.labels[0] == es.labels[7]
        assert sub.groups[2] == es.groups[2]

    def test_predictions_tie_break_lowest_index(self):
        es = EmbeddingSet(
            features=[[0.0], [0.0]],
            logits=[[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]],
        )
        assert es.predictions().tolist() == [0, 1]

    def test_head_logits_recompute(self):
        head = ModelHead(weight=[[1.0, 0.0], [0.0, 2.0]], bias=[1.0, -1.0])
        out = head.logits(np.array([[3.0, 4.0]]))
        assert out.tolist() == [[4.0, 7.0]]

    def test_head_invariants(self):
        with pytest.raises(ValueError):
            ModelHead(weight=[[1.0, 2.0]], bias=[0.0])  # c < 2
        with pytest.raises(ValueError):
            ModelHead(weight=[[1.0], [2.0]], bias=[0.0])  # bias length
        with pytest.raises(ValueError):
            ModelHead(weight=[[np.nan], [1.0]], bias=[0.0, 0.0])


class TestSynthetic:
    def test_deterministic_and_seed_sensitive(self):
        a1, h1 = generate_synthetic(4, 8, 10, seed=42)
        a2, h2 = generate_synthetic(4, 8, 10, seed=42)
        b, _ = generate_synthetic(4, 8, 10, seed=43)
        assert a1 == a2 and h1 == h2
        assert eds_bytes(a1) == eds_bytes(a2)
        assert a1 != b

    def test_shapes_and_labels(self):
        es, head = generate_synthetic(3, 5, 7, seed=0)
        assert (es.n, es.d, es.c) == (21, 5, 3)
        assert (head.c, head.d) == (3, 5)
        assert es.labels.tolist() == [0] * 7 + [1] * 7 + [2] * 7

    def test_round_trip_bit_exact(self):
        es, head = generate_synthetic(3, 6, 5, seed=9)
        assert read_eds(eds_bytes(es)) == es
        assert read_head(head_bytes(head)) == head

    def test_stored_logits_match_head(self):
        es, head = generate_synthetic(5, 12, 20, seed=3)
        drift = np.max(np.abs(head.logits(es.features) - es.logits))
        assert drift < 1e-3  # within the consistency-warning budget

    def test_orthogonal_centroids_when_classes_fit(self):
        # nearly noise-free draw exposes the centroid geometry
        es, _ = generate_synthetic(
            4, 10, 1, centroid_scale=7.0, noise_scale=1e-6, seed=1
        )
        gram = es.features @ es.features.T
        off_diag = gram - np.diag(np.diag(gram))
        assert np.allclose(np.diag(gram), 49.0, atol=1e-3)
        assert np.max(np.abs(off_diag)) < 1e-3

    def test_normalized_centroids_when_classes_exceed_dim(self):
        es, _ = generate_synthetic(
            10, 3, 1, centroid_scale=5.0, noise_scale=1e-6, seed=2
        )
        norms = np.linalg.norm(es.features, axis=1)
        assert np.allclose(norms, 5.0, atol=1e-3)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 4, 5)
        with pytest.raises(ValueError):
            generate_synthetic(3, 0, 5)
        with pytest.raises(ValueError):
            generate_synthetic(3, 4, 0)
        with pytest.raises(ValueError):
            generate_synthetic(3, 4, 5, noise_scale=0.0)
