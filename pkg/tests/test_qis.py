import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stegattn.qis import (
    COVER,
    STEGO,
    CodecShape,
    Corpus,
    EmptySample,
    FormatError,
    IndexOutOfRange,
    QisSample,
    SampleMeta,
    ShapeMismatch,
    StreamTooShort,
    derive_seeds,
    generate_cover,
    generate_cover_corpus,
    read_corpus,
    sample_cover_model,
    slide_windows,
    validate_sample,
    write_corpus,
)


class TestCodecShape:
    def test_defaults(self, codec_shape):
        assert codec_shape.codebook_sizes == (128, 32, 32)
        assert codec_shape.positions == 3
        assert codec_shape.vocab_size == 192
        assert codec_shape.offsets == (0, 128, 160)
        assert codec_shape.duration_ms(30) == 300.0

    def test_rejects_wrong_position_count(self):
        with pytest.raises(ValueError):
            CodecShape(codebook_sizes=(128, 32))

    def test_rejects_tiny_codebook(self):
        with pytest.raises(ValueError):
            CodecShape(codebook_sizes=(128, 1, 32))


class TestValidateSample:
    def test_accepts_valid_matrix(self, codec_shape):
        indices = np.array([[0, 0, 0], [127, 31, 31]])
        s = validate_sample(indices, codec_shape, label=STEGO, seed=9, embedding_rate=0.5)
        assert s.label == STEGO
        assert s.meta == SampleMeta(seed=9, embedding_rate=0.5, duration_ms=20.0)
        assert s.indices.dtype == np.int64

    def test_rejects_empty(self, codec_shape):
        with pytest.raises(EmptySample):
            validate_sample(np.empty((0, 3), dtype=np.int64), codec_shape)

    def test_reports_first_row_major_violation(self, codec_shape):
        indices = np.array([[0, 0, 0], [5, 40, 0], [200, 0, 0]])
        with pytest.raises(IndexOutOfRange) as err:
            validate_sample(indices, codec_shape)
        assert (err.value.frame, err.value.position) == (1, 1)
        assert err.value.value == 40
        assert err.value.size == 32

    def test_rejects_negative(self, codec_shape):
        with pytest.raises(IndexOutOfRange):
            validate_sample(np.array([[0, -1, 0]]), codec_shape)

    def test_rejects_non_integer(self, codec_shape):
        with pytest.raises(ValueError):
            validate_sample(np.array([[0.5, 0.0, 0.0]]), codec_shape)

    @given(
        t=st.integers(min_value=1, max_value=20),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_accepts_any_in_range_matrix(self, t, seed):
        shape = CodecShape()
        rng = np.random.default_rng(seed)
        indices = rng.integers(0, np.array(shape.codebook_sizes), size=(t, 3))
        s = validate_sample(indices, shape)
        assert s.frames == t
        assert np.array_equal(s.indices, indices)


class TestCoverModel:
    def test_rows_are_distributions(self, codec_shape):
        model = sample_cover_model(codec_shape, concentration=0.3, seed=1)
        for p, k in enumerate(codec_shape.codebook_sizes):
            assert model.transitions[p].shape == (k, k)
            np.testing.assert_allclose(model.transitions[p].sum(axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(model.initials[p].sum(), 1.0, atol=1e-12)
            assert (model.transitions[p] >= 0).all()

    def test_seeded_reproducibility(self, codec_shape):
        a = sample_cover_model(codec_shape, 0.3, seed=5)
        b = sample_cover_model(codec_shape, 0.3, seed=5)
        for p in range(3):
            assert np.array_equal(a.transitions[p], b.transitions[p])

    def test_rejects_nonpositive_concentration(self, codec_shape):
        with pytest.raises(ValueError):
            sample_cover_model(codec_shape, 0.0, seed=0)

    def test_chain_visits_match_stationary_distribution(self, small_shape):
        # oracle: stationary distribution from power iteration on the
        # transition matrix, compared to empirical visit frequencies
        model = sample_cover_model(small_shape, concentration=1.0, seed=7)
        frames = 4000
        sample = generate_cover(model, frames, seed=3)
        for p, k in enumerate(small_shape.codebook_sizes):
            pi = np.full(k, 1.0 / k)
            for _ in range(500):
                pi = pi @ model.transitions[p]
            counts = np.bincount(sample.indices[:, p], minlength=k)
            freq = counts / frames
            # 3 sigma per state under a binomial approximation
            sigma = np.sqrt(np.maximum(pi * (1 - pi) / frames, 1e-12))
            assert np.all(np.abs(freq - pi) < 3 * sigma + 0.02)


class TestGenerateCover:
    def test_shapes_and_meta(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        s = generate_cover(model, 30, seed=42)
        assert s.indices.shape == (30, 3)
        assert s.label == COVER
        assert s.meta.seed == 42
        assert s.meta.duration_ms == 300.0
        validate_sample(s.indices, codec_shape)

    def test_pure_function_of_seed(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        assert generate_cover(model, 20, seed=9) == generate_cover(model, 20, seed=9)
        assert generate_cover(model, 20, seed=9) != generate_cover(model, 20, seed=10)

    def test_rejects_zero_frames(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        with pytest.raises(EmptySample):
            generate_cover(model, 0, seed=1)

    def test_corpus_uses_distinct_derived_seeds(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        corpus = generate_cover_corpus(model, 8, 10, seed=77)
        assert len(corpus) == 8
        seeds = [s.meta.seed for s in corpus.samples]
        assert len(set(seeds)) == 8
        assert seeds == derive_seeds(77, 8)
        corpus.validate()


class TestSlideWindows:
    def test_counts_contract(self, codec_shape):
        stream = np.zeros((100, 3), dtype=np.int64)
        assert len(slide_windows(stream, 10, 10, codec_shape)) == 10
        assert len(slide_windows(stream, 30, 10, codec_shape)) == 8
        assert len(slide_windows(stream, 100, 7, codec_shape)) == 1

    def test_window_contents_and_isolation(self, codec_shape):
        stream = np.arange(60).reshape(20, 3) % 32
        wins = slide_windows(stream, 5, 5, codec_shape)
        assert np.array_equal(wins[1].indices, stream[5:10])
        wins[0].indices[0, 0] = 31  # copies, not views
        assert stream[0, 0] != 31

    def test_too_short_stream(self, codec_shape):
        with pytest.raises(StreamTooShort):
            slide_windows(np.zeros((5, 3), dtype=np.int64), 10, 1, codec_shape)

    @given(
        n=st.integers(min_value=1, max_value=200),
        window=st.integers(min_value=1, max_value=50),
        stride=st.integers(min_value=1, max_value=50),
    )
    @settings(max_examples=60, deadline=None)
    def test_count_formula(self, n, window, stride):
        shape = CodecShape()
        stream = np.zeros((n, 3), dtype=np.int64)
        if n < window:
            with pytest.raises(StreamTooShort):
                slide_windows(stream, window, stride, shape)
        else:
            wins = slide_windows(stream, window, stride, shape)
            assert len(wins) == (n - window) // stride + 1
            for i, w in enumerate(wins):
                assert w.frames == window
                assert i * stride + window <= n


class TestCorpusFormat:
    def _corpus(self, n=4, frames=6, seed=0):
        shape = CodecShape()
        model = sample_cover_model(shape, 0.3, seed=seed)
        return generate_cover_corpus(model, n, frames, seed=seed)

    def test_round_trip_is_bit_exact(self):
        corpus = self._corpus()
        buf = io.StringIO()
        write_corpus(corpus, buf)
        text = buf.getvalue()
        again = read_corpus(io.StringIO(text))
        assert again == corpus
        buf2 = io.StringIO()
        write_corpus(again, buf2)
        assert buf2.getvalue() == text

    def test_file_round_trip(self, tmp_path):
        corpus = self._corpus(seed=3)
        path = tmp_path / "c.qisc"
        write_corpus(corpus, path)
        assert read_corpus(path) == corpus

    def test_magic_line(self, tmp_path):
        corpus = self._corpus()
        path = tmp_path / "c.qisc"
        write_corpus(corpus, path)
        assert path.read_text().split("\n")[0] == "QISC1"

    def test_bad_magic_reports_line_and_offset(self):
        with pytest.raises(FormatError) as err:
            read_corpus(io.StringIO("NOPE\n"))
        assert err.value.line == 1
        assert err.value.offset == 0

    def test_truncated_file(self):
        corpus = self._corpus()
        buf = io.StringIO()
        write_corpus(corpus, buf)
        lines = buf.getvalue().split("\n")
        with pytest.raises(FormatError):
            read_corpus(io.StringIO("\n".join(lines[:-4])))

    def test_out_of_range_index_rejected_on_read(self):
        corpus = self._corpus()
        buf = io.StringIO()
        write_corpus(corpus, buf)
        lines = buf.getvalue().split("\n")
        lines[6] = "500 0 0"  # first data row
        with pytest.raises(FormatError):
            read_corpus(io.StringIO("\n".join(lines)))

    def test_trailing_garbage_rejected(self):
        corpus = self._corpus()
        buf = io.StringIO()
        write_corpus(corpus, buf)
        with pytest.raises(FormatError):
            read_corpus(io.StringIO(buf.getvalue() + "1 2 3\n"))

    def test_mixed_frame_counts_rejected_on_write(self):
        corpus = self._corpus()
        corpus.samples[1] = QisSample(indices=np.zeros((9, 3), dtype=np.int64))
        with pytest.raises(ShapeMismatch):
            write_corpus(corpus, io.StringIO())

    def test_empty_corpus_rejected(self, codec_shape):
        with pytest.raises(EmptySample):
            write_corpus(Corpus(codec_shape, []), io.StringIO())

    @given(
        n=st.integers(min_value=1, max_value=6),
        frames=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=1000),
        rate=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    )
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, n, frames, seed, rate):
        shape = CodecShape(codebook_sizes=(5, 4, 3), frame_duration_ms=12.5)
        rng = np.random.default_rng(seed)
        samples = []
        for i in range(n):
            indices = rng.integers(0, np.array(shape.codebook_sizes), size=(frames, 3))
            samples.append(validate_sample(indices, shape, label=i % 2,
                                           seed=seed + i, embedding_rate=rate))
        corpus = Corpus(shape, samples)
        buf = io.StringIO()
        write_corpus(corpus, buf)
        assert read_corpus(io.StringIO(buf.getvalue())) == corpus


class TestDeriveSeeds:
    def test_stable_prefix(self):
        assert derive_seeds(5, 3) == derive_seeds(5, 8)[:3]

    def test_distinct_keys(self):
        assert derive_seeds((1, 2), 4) != derive_seeds((1, 3), 4)
