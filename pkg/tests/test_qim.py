import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stegattn.qim import (
    BitExhaustion,
    Codebook,
    Partition,
    StegoConfig,
    build_partition,
    default_codebooks,
    embed_bits,
    extract_bits,
    make_stego_corpus,
    read_sidecar,
    requant_maps,
    synth_codebook,
    write_sidecar,
)
from stegattn.qis import (
    COVER,
    STEGO,
    CodecShape,
    FormatError,
    ShapeMismatch,
    generate_cover,
    generate_cover_corpus,
    sample_cover_model,
)


def _pipeline(shape, seed=0):
    codebooks, partitions = default_codebooks(shape, seed=seed)
    return codebooks, partitions, requant_maps(codebooks, partitions)


class TestPartition:
    @given(size=st.integers(min_value=2, max_value=200), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_balanced(self, size, seed):
        part = build_partition(size, seed)
        n1 = int(part.labels.sum())
        assert abs((size - n1) - n1) <= 1
        assert part.labels.dtype == np.uint8

    def test_seeded(self):
        assert build_partition(32, 7) == build_partition(32, 7)
        assert build_partition(32, 7) != build_partition(32, 8)

    def test_too_small(self):
        with pytest.raises(ValueError):
            build_partition(1, 0)

    def test_validate_rejects_unbalanced(self):
        part = Partition(labels=np.array([1, 1, 1, 0], dtype=np.uint8), seed=0)
        with pytest.raises(ValueError):
            part.validate()


class TestStegoConfig:
    def test_rate_bounds(self):
        StegoConfig(embedding_rate=0.0)
        StegoConfig(embedding_rate=1.0)
        with pytest.raises(ValueError):
            StegoConfig(embedding_rate=1.5)
        with pytest.raises(ValueError):
            StegoConfig(embedding_rate=-0.1)

    def test_positions_checked(self):
        assert StegoConfig(positions_used=(2, 0)).positions_used == (0, 2)
        with pytest.raises(ValueError):
            StegoConfig(positions_used=())
        with pytest.raises(ValueError):
            StegoConfig(positions_used=(0, 3))
        with pytest.raises(ValueError):
            StegoConfig(positions_used=(1, 1))


class TestCodebooks:
    def test_synth_rows_unique(self):
        cb = synth_codebook(0, 64, 4, seed=11)
        assert cb.size == 64 and cb.dim == 4
        assert np.unique(cb.vectors, axis=0).shape[0] == 64

    def test_default_set_matches_codec(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        for p, k in enumerate(codec_shape.codebook_sizes):
            assert codebooks[p].size == k
            assert partitions[p].labels.size == k

    def test_default_set_seeded(self, codec_shape):
        a = default_codebooks(codec_shape, seed=3)
        b = default_codebooks(codec_shape, seed=3)
        assert a[0] == b[0] and a[1] == b[1]


class TestRequantMaps:
    def test_nearest_in_class_oracle(self, small_shape):
        # brute force: mapped index must be the argmin of squared distance
        # among codewords carrying the requested label
        codebooks, partitions, maps = _pipeline(small_shape, seed=5)
        for cb, part, table in zip(codebooks, partitions, maps):
            for i in range(cb.size):
                for b in (0, 1):
                    allowed = np.flatnonzero(part.labels == b)
                    d2 = ((cb.vectors[i] - cb.vectors[allowed]) ** 2).sum(axis=1)
                    best = allowed[d2 == d2.min()]
                    assert table[b, i] == best.min()
                    assert part.labels[table[b, i]] == b

    def test_matching_label_is_fixed_point(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        maps = requant_maps(codebooks, partitions)
        for part, table in zip(partitions, maps):
            idx = np.arange(part.labels.size)
            keep = table[part.labels.astype(np.int64), idx]
            assert np.array_equal(keep, idx)

    def test_ties_resolve_to_lowest_index(self):
        # vector 1.0 sits exactly between the two label-1 codewords 0.0 and 2.0
        cb = Codebook(position=0, vectors=np.array([[0.0], [1.0], [2.0], [3.0]]), seed=0)
        part = Partition(labels=np.array([1, 0, 1, 0], dtype=np.uint8), seed=0)
        table = requant_maps([cb], [part])[0]
        assert table[1, 1] == 0

    def test_size_mismatch(self):
        cb = synth_codebook(0, 8, 2, seed=0)
        part = build_partition(6, seed=0)
        with pytest.raises(ShapeMismatch):
            requant_maps([cb], [part])


class TestEmbedExtract:
    def _cover(self, shape, frames=10, seed=0):
        model = sample_cover_model(shape, 0.3, seed=seed)
        return generate_cover(model, frames, seed=seed + 1)

    def test_full_rate_log_is_frame_major(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=10)
        bits = np.zeros(30, dtype=np.int64)
        stego, log = embed_bits(cover, bits, StegoConfig(embedding_rate=1.0),
                                codebooks, partitions, seed=4)
        assert log.shape == (30, 2)
        expected = np.stack([np.repeat(np.arange(10), 3), np.tile([0, 1, 2], 10)], axis=1)
        assert np.array_equal(log, expected)
        assert stego.label == STEGO
        assert stego.meta.embedding_rate == 1.0

    def test_round_trip_small(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=20, seed=2)
        rng = np.random.default_rng(5)
        bits = rng.integers(0, 2, 60)
        stego, log = embed_bits(cover, bits, StegoConfig(embedding_rate=0.7),
                                codebooks, partitions, seed=6)
        out = extract_bits(stego, log, partitions)
        assert np.array_equal(out, bits[: log.shape[0]])

    def test_rate_zero_stays_cover(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape)
        stego, log = embed_bits(cover, np.zeros(30, dtype=np.int64),
                                StegoConfig(embedding_rate=0.0),
                                codebooks, partitions, seed=1)
        assert log.shape[0] == 0
        assert stego.label == COVER
        assert stego.meta.embedding_rate == 0.0
        assert np.array_equal(stego.indices, cover.indices)

    def test_bit_exhaustion(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape)
        cfg = StegoConfig(embedding_rate=1.0)
        embed_bits(cover, np.zeros(30, dtype=np.int64), cfg, codebooks, partitions, seed=0)
        with pytest.raises(BitExhaustion):
            embed_bits(cover, np.zeros(29, dtype=np.int64), cfg, codebooks, partitions, seed=0)

    def test_rejects_non_binary_bits(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape)
        with pytest.raises(ValueError):
            embed_bits(cover, np.array([0, 2]), StegoConfig(embedding_rate=0.0),
                       codebooks, partitions, seed=0)

    def test_untouched_positions_preserved(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=15, seed=9)
        cfg = StegoConfig(embedding_rate=1.0, positions_used=(1,))
        stego, log = embed_bits(cover, np.ones(15, dtype=np.int64), cfg,
                                codebooks, partitions, seed=3)
        assert set(log[:, 1]) == {1}
        assert np.array_equal(stego.indices[:, [0, 2]], cover.indices[:, [0, 2]])

    def test_frame_selection_fraction(self, codec_shape, default_qim):
        # Bernoulli(rate) frame choice: selected fraction within 3 sigma
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=2000, seed=13)
        rate = 0.3
        _, log = embed_bits(cover, np.zeros(6000, dtype=np.int64),
                            StegoConfig(embedding_rate=rate),
                            codebooks, partitions, seed=21)
        n_frames = np.unique(log[:, 0]).size
        assert log.shape[0] == 3 * n_frames  # whole frames carry all positions
        sigma = np.sqrt(rate * (1 - rate) / 2000)
        assert abs(n_frames / 2000 - rate) < 3 * sigma

    def test_slot_level_selection(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=2000, seed=14)
        cfg = StegoConfig(embedding_rate=0.3, frame_level=False)
        _, log = embed_bits(cover, np.zeros(6000, dtype=np.int64), cfg,
                            codebooks, partitions, seed=22)
        # slots chosen independently, so partially filled frames exist
        counts = np.bincount(log[:, 0], minlength=2000)
        assert set(np.unique(counts)) - {0, 3} != set()
        sigma = np.sqrt(0.3 * 0.7 / 6000)
        assert abs(log.shape[0] / 6000 - 0.3) < 3 * sigma

    def test_stego_label_frequency_matches_payload(self, codec_shape, default_qim):
        # at full rate the label sequence of logged slots IS the payload,
        # so label-1 frequency must match a fair-coin payload within 3 sigma
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=1500, seed=17)
        rng = np.random.default_rng(8)
        bits = rng.integers(0, 2, 4500)
        stego, log = embed_bits(cover, bits, StegoConfig(embedding_rate=1.0),
                                codebooks, partitions, seed=18)
        labels = extract_bits(stego, log, partitions)
        assert np.array_equal(labels, bits)
        sigma = np.sqrt(0.25 / 4500)
        assert abs(labels.mean() - 0.5) < 3 * sigma

    def test_requant_flip_fraction(self, codec_shape, default_qim):
        # an index moves only when its label disagrees with the bit: half the
        # time under a uniform payload, independent of the cover
        codebooks, partitions = default_qim
        cover = self._cover(codec_shape, frames=1500, seed=19)
        rng = np.random.default_rng(9)
        bits = rng.integers(0, 2, 4500)
        stego, log = embed_bits(cover, bits, StegoConfig(embedding_rate=1.0),
                                codebooks, partitions, seed=20)
        changed = (stego.indices != cover.indices).mean()
        sigma = np.sqrt(0.25 / 4500)
        assert abs(changed - 0.5) < 3 * sigma

    @given(
        frames=st.integers(min_value=1, max_value=30),
        rate=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        seed=st.integers(0, 10_000),
        frame_level=st.booleans(),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, frames, rate, seed, frame_level):
        shape = CodecShape(codebook_sizes=(8, 6, 4))
        codebooks, partitions = default_codebooks(shape, seed=1)
        model = sample_cover_model(shape, 0.5, seed=seed)
        cover = generate_cover(model, frames, seed=seed)
        rng = np.random.default_rng(seed + 1)
        bits = rng.integers(0, 2, frames * 3)
        cfg = StegoConfig(embedding_rate=rate, frame_level=frame_level)
        stego, log = embed_bits(cover, bits, cfg, codebooks, partitions, seed=seed + 2)
        assert np.array_equal(extract_bits(stego, log, partitions), bits[: log.shape[0]])
        assert stego.label == (STEGO if log.shape[0] else COVER)
        untouched = np.ones((frames, 3), dtype=bool)
        untouched[log[:, 0], log[:, 1]] = False
        assert np.array_equal(stego.indices[untouched], cover.indices[untouched])


class TestStegoCorpus:
    def test_paired_and_seeded(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        covers = generate_cover_corpus(model, 6, 12, seed=10)
        cfg = StegoConfig(embedding_rate=1.0)
        a = make_stego_corpus(covers, cfg, seed=11)
        b = make_stego_corpus(covers, cfg, seed=11)
        c = make_stego_corpus(covers, cfg, seed=12)
        assert a == b
        assert a != c
        assert len(a) == 6 and a.frames == 12
        assert all(s.label == STEGO for s in a.samples)
        assert all(s.meta.embedding_rate == 1.0 for s in a.samples)

    def test_rate_zero_corpus_is_covers(self, codec_shape):
        model = sample_cover_model(codec_shape, 0.3, seed=0)
        covers = generate_cover_corpus(model, 4, 8, seed=10)
        out = make_stego_corpus(covers, StegoConfig(embedding_rate=0.0), seed=11)
        for cover, s in zip(covers.samples, out.samples):
            assert s.label == COVER
            assert np.array_equal(s.indices, cover.indices)


class TestSidecarFormat:
    def test_round_trip_bit_exact(self, codec_shape, default_qim):
        codebooks, partitions = default_qim
        buf = io.StringIO()
        write_sidecar(codebooks, partitions, buf)
        text = buf.getvalue()
        cbs, parts = read_sidecar(io.StringIO(text))
        assert cbs == codebooks and parts == partitions
        buf2 = io.StringIO()
        write_sidecar(cbs, parts, buf2)
        assert buf2.getvalue() == text

    def test_file_round_trip(self, tmp_path, small_shape):
        codebooks, partitions = default_codebooks(small_shape, seed=2)
        path = tmp_path / "c.qimp"
        write_sidecar(codebooks, partitions, path)
        cbs, parts = read_sidecar(path)
        assert cbs == codebooks and parts == partitions

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            read_sidecar(io.StringIO("WRONG\n"))
        assert err.value.line == 1

    def test_truncated(self, small_shape):
        codebooks, partitions = default_codebooks(small_shape, seed=2)
        buf = io.StringIO()
        write_sidecar(codebooks, partitions, buf)
        lines = buf.getvalue().split("\n")
        with pytest.raises(FormatError):
            read_sidecar(io.StringIO("\n".join(lines[:-3])))

    def test_trailing_garbage(self, small_shape):
        codebooks, partitions = default_codebooks(small_shape, seed=2)
        buf = io.StringIO()
        write_sidecar(codebooks, partitions, buf)
        with pytest.raises(FormatError):
            read_sidecar(io.StringIO(buf.getvalue() + "extra\n"))

    def test_unbalanced_labels_rejected(self, small_shape):
        codebooks, partitions = default_codebooks(small_shape, seed=2)
        buf = io.StringIO()
        write_sidecar(codebooks, partitions, buf)
        lines = buf.getvalue().split("\n")
        k = small_shape.codebook_sizes[0]
        lines[4 + k] = " ".join(["1"] * k)  # partition labels for position 0
        with pytest.raises(FormatError):
            read_sidecar(io.StringIO("\n".join(lines)))

    def test_mismatched_lists_rejected(self, small_shape):
        codebooks, partitions = default_codebooks(small_shape, seed=2)
        with pytest.raises(ShapeMismatch):
            write_sidecar(codebooks, partitions[:2], io.StringIO())
