"""Feature containers, pooling, position logic, file format, synthetic tasks."""

import numpy as np
import pytest

from mist import features as ft
from mist import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(77)


def video_of(arr, **kw):
    return ft.VideoFeatures(nx.tensor(arr), **kw)


# -- oracles -----------------------------------------------------------------


def pool_oracle(x):
    """Loop-based mean pooling: patches -> frames -> segments."""
    k, t, n, d = x.shape
    frames = np.zeros((k, t, d))
    for i in range(k):
        for j in range(t):
            for p in range(n):
                frames[i, j] += x[i, j, p] / n
    segments = np.zeros((k, d))
    for i in range(k):
        for j in range(t):
            segments[i] += frames[i, j] / t
    return frames, segments


def metadata_label(sample):
    """Answer rule straight from the planting metadata."""
    if sample.kind == ft.MULTI_EVENT_ORDER:
        later = max(sample.events, key=lambda e: e.segment)
        return later.class_id
    return sample.events[0].class_id


# -- pooling -----------------------------------------------------------------


class TestPooling:
    def test_constant_video(self):
        v = video_of(np.full((2, 3, 4, 5), 2.5))
        frames, segments = ft.pool_hierarchy(v)
        np.testing.assert_array_equal(frames.data, np.full((2, 3, 5), 2.5))
        np.testing.assert_array_equal(segments.data, np.full((2, 5), 2.5))

    def test_hand_computed(self):
        # K=1, T=2, N=2, D=1 with patches [[1, 3], [5, 7]]:
        # frame means are 2 and 6, segment mean is 4
        x = np.array([[[[1.0], [3.0]], [[5.0], [7.0]]]])
        frames, segments = ft.pool_hierarchy(video_of(x))
        np.testing.assert_allclose(frames.data, [[[2.0], [6.0]]])
        np.testing.assert_allclose(segments.data, [[4.0]])

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(3, 2, 4, 5))
        frames, segments = ft.pool_hierarchy(video_of(x))
        want_f, want_s = pool_oracle(x)
        np.testing.assert_allclose(frames.data, want_f, atol=1e-12)
        np.testing.assert_allclose(segments.data, want_s, atol=1e-12)

    def test_first_token_mode(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        v = video_of(x, has_cls_patch=True)
        frames, segments = ft.pool_hierarchy(v, ft.POOL_FIRST_TOKEN)
        np.testing.assert_array_equal(frames.data, x[:, :, 0, :])
        np.testing.assert_allclose(segments.data, x[:, :, 0, :].mean(axis=1))

    def test_first_token_needs_cls(self, rng):
        v = video_of(rng.normal(size=(2, 3, 4, 5)))
        with pytest.raises(ValueError):
            ft.pool_hierarchy(v, ft.POOL_FIRST_TOKEN)

    def test_question_pooling_modes(self, rng):
        w = rng.normal(size=(4, 6))
        q = ft.QuestionFeatures(nx.tensor(w))
        np.testing.assert_allclose(ft.pool_question(q).data, w.mean(axis=0))
        np.testing.assert_array_equal(
            ft.pool_question(q, ft.POOL_FIRST_TOKEN).data, w[0]
        )


# -- positions ---------------------------------------------------------------


def make_table(rng, k, t, d, type_rows=True):
    temporal = nx.tensor(rng.normal(size=(k * t + 1, d)))
    typ = nx.tensor(rng.normal(size=(3, d))) if type_rows else None
    return ft.PositionTable(temporal, typ)


class TestPositions:
    def test_zero_table_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 2, 4))
        v = video_of(x)
        table = ft.PositionTable(nx.tensor(np.zeros((7, 4))))
        out = ft.add_positions(v, table)
        np.testing.assert_array_equal(out.x.data, x)
        assert out.positions_added
        assert not v.positions_added

    def test_zero_features_reveal_rows(self, rng):
        k, t, n, d = 2, 3, 2, 4
        table = make_table(rng, k, t, d)
        v = video_of(np.zeros((k, t, n, d)))
        out = ft.add_positions(v, table)
        for ki in range(k):
            for ti in range(t):
                want = table.temporal.data[ki * t + ti + 1]
                for ni in range(n):
                    np.testing.assert_array_equal(out.x.data[ki, ti, ni], want)

    def test_row_zero_reserved(self, rng):
        # with distinct rows, no frame ever receives row 0
        k, t, n, d = 2, 2, 1, 3
        temporal = np.arange((k * t + 1) * d, dtype=float).reshape(k * t + 1, d)
        table = ft.PositionTable(nx.tensor(temporal))
        out = ft.add_positions(video_of(np.zeros((k, t, n, d))), table)
        flat = out.x.data.reshape(-1, d)
        for row in flat:
            assert not np.array_equal(row, temporal[0])

    def test_double_apply_rejected(self, rng):
        v = video_of(rng.normal(size=(1, 2, 2, 3)))
        table = make_table(rng, 1, 2, 3)
        out = ft.add_positions(v, table)
        with pytest.raises(ValueError):
            ft.add_positions(out, table)

    def test_wrong_row_count_rejected(self, rng):
        v = video_of(rng.normal(size=(2, 2, 2, 3)))
        with pytest.raises(nx.ShapeMismatch):
            ft.add_positions(v, ft.PositionTable(nx.tensor(rng.normal(size=(4, 3)))))

    def test_gradient_reaches_table(self, rng):
        k, t, n, d = 2, 2, 2, 3
        temporal = nx.parameter(rng.normal(size=(k * t + 1, d)), "pos")
        table = ft.PositionTable(temporal)
        out = ft.add_positions(video_of(rng.normal(size=(k, t, n, d))), table)
        nx.tsum(out.x).backward()
        # every used row accumulates once per patch; row 0 stays zero
        np.testing.assert_allclose(temporal.grad[0], np.zeros(d))
        np.testing.assert_allclose(temporal.grad[1:], np.full((k * t, d), n))

    def test_type_table_must_have_three_rows(self, rng):
        with pytest.raises(nx.ShapeMismatch):
            ft.PositionTable(
                nx.tensor(rng.normal(size=(5, 4))),
                nx.tensor(rng.normal(size=(2, 4))),
            )


# -- file format -------------------------------------------------------------


class TestFeatureFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ft.SynthConfig(k_segments=2, t_frames=2, n_patches=3, dim=8,
                             m_words=3, n_answers=3)
        s = ft.generate_synthetic(cfg, 5)
        path = tmp_path / "sample.mistfeat"
        ft.save_features(s.video, s.question, s.answers, path)
        video, question, answers = ft.load_features(path)
        assert video.x.data.tobytes() == s.video.x.data.tobytes()
        assert question.w.data.tobytes() == s.question.w.data.tobytes()
        assert answers.a.data.tobytes() == s.answers.a.data.tobytes()
        assert not video.positions_added

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ft.FeatureFormatError, match="magic"):
            ft.load_features(path)

    def test_truncated_payload(self, tmp_path):
        cfg = ft.SynthConfig(k_segments=1, t_frames=1, n_patches=2, dim=4,
                             m_words=2, n_answers=2)
        s = ft.generate_synthetic(cfg, 0)
        path = tmp_path / "short.mistfeat"
        ft.save_features(s.video, s.question, s.answers, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ft.FeatureFormatError, match="payload"):
            ft.load_features(path)

    def test_header_payload_mismatch(self, tmp_path):
        cfg = ft.SynthConfig(k_segments=1, t_frames=1, n_patches=2, dim=4,
                             m_words=2, n_answers=2)
        s = ft.generate_synthetic(cfg, 0)
        path = tmp_path / "extra.mistfeat"
        ft.save_features(s.video, s.question, s.answers, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(ft.FeatureFormatError, match="payload"):
            ft.load_features(path)

    def test_nonfinite_payload_rejected(self, tmp_path):
        cfg = ft.SynthConfig(k_segments=1, t_frames=1, n_patches=2, dim=4,
                             m_words=2, n_answers=2)
        s = ft.generate_synthetic(cfg, 0)
        path = tmp_path / "nan.mistfeat"
        ft.save_features(s.video, s.question, s.answers, path)
        blob = bytearray(path.read_bytes())
        blob[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(ft.FeatureFormatError, match="finite"):
            ft.load_features(path)

    def test_header_is_json_with_declared_keys(self, tmp_path):
        import json
        import struct

        cfg = ft.SynthConfig(k_segments=2, t_frames=1, n_patches=2, dim=4,
                             m_words=2, n_answers=2)
        s = ft.generate_synthetic(cfg, 3)
        path = tmp_path / "hdr.mistfeat"
        ft.save_features(s.video, s.question, s.answers, path)
        raw = path.read_bytes()
        assert raw[:8] == b"MISTFEAT"
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12:12 + hlen])
        assert header["K"] == 2 and header["T"] == 1
        assert header["dtype"] == "f32"
        assert set(header) == {
            "version", "K", "T", "N", "D", "M", "A", "dtype", "cls_patch", "cls_frame"
        }


# -- synthetic tasks ---------------------------------------------------------


class TestSyntheticTasks:
    def test_noiseless_plant_fills_every_frame_of_segment(self):
        cfg = ft.SynthConfig(noise_std=0.0, k_segments=4, t_frames=2,
                             n_patches=4, dim=16, n_answers=4)
        s = ft.generate_synthetic(cfg, 11)
        ev = s.events[0]
        proto = s.answers.a.data[ev.class_id]
        for t in range(2):
            planted = s.video.x.data[ev.segment, t, ev.patch]
            assert planted.tobytes() == proto.tobytes()
        others = s.video.x.data.reshape(-1, 16)
        zero_rows = (others == 0).all(axis=1).sum()
        assert zero_rows == 4 * 2 * 4 - 2

    def test_planted_segment_is_detectable_from_pooled_means(self):
        # the point of segment-spanning events: an oracle linear detector
        # on segment means must rank the planted segment highly, otherwise
        # temporal selection could never reach the required hit-rates
        cfg = ft.SynthConfig()
        _, cue = ft.task_prototypes(cfg)
        top2 = 0
        n = 400
        for seed in range(n):
            s = ft.generate_synthetic(cfg, seed)
            means = s.video.x.data.mean(axis=(1, 2))
            order = np.argsort(-(means @ cue))
            top2 += s.events[0].segment in order[:2]
        assert top2 / n > 0.85

    def test_deterministic_per_seed(self):
        cfg = ft.SynthConfig()
        a = ft.generate_synthetic(cfg, 9)
        b = ft.generate_synthetic(cfg, 9)
        assert a.video.x.data.tobytes() == b.video.x.data.tobytes()
        assert a.label == b.label and a.events == b.events
        c = ft.generate_synthetic(cfg, 10)
        assert a.video.x.data.tobytes() != c.video.x.data.tobytes()

    def test_prototypes_orthonormal_and_shared(self):
        cfg = ft.SynthConfig(n_answers=6, dim=24)
        s1 = ft.generate_synthetic(cfg, 1)
        s2 = ft.generate_synthetic(cfg, 2)
        assert s1.answers.a.data.tobytes() == s2.answers.a.data.tobytes()
        gram = s1.answers.a.data @ s1.answers.a.data.T
        np.testing.assert_allclose(gram, np.eye(6), atol=1e-6)

    def test_metadata_oracle_reproduces_label(self):
        # brute-force oracle over many samples and both tasks
        for kind in ft.TASK_KINDS:
            cfg = ft.SynthConfig(kind=kind, k_segments=6, n_answers=4, dim=16)
            for seed in range(1000):
                s = ft.generate_synthetic(cfg, seed)
                assert metadata_label(s) == s.label

    def test_order_task_placement(self):
        cfg = ft.SynthConfig(kind=ft.MULTI_EVENT_ORDER, k_segments=8)
        protos, _ = ft.task_prototypes(cfg)
        for seed in range(200):
            s = ft.generate_synthetic(cfg, seed)
            early, late = s.events
            assert early.segment < late.segment
            assert early.class_id != late.class_id
            assert s.label == late.class_id
            # the question names the earlier class
            np.testing.assert_array_equal(s.question.w.data[0], protos[early.class_id])
            assert s.answer_event == late

    def test_single_event_question_is_cue_not_class(self):
        cfg = ft.SynthConfig()
        protos, cue = ft.task_prototypes(cfg)
        s = ft.generate_synthetic(cfg, 4)
        np.testing.assert_array_equal(s.question.w.data[0], cue)
        # cue aligns equally with every class, so it carries no label
        # information but lives in the class subspace
        a = len(protos)
        np.testing.assert_allclose(protos @ cue, np.full(a, 1 / np.sqrt(a)),
                                   atol=1e-6)
        # and it is the same vector for every sample
        s2 = ft.generate_synthetic(cfg, 99)
        np.testing.assert_array_equal(s2.question.w.data[0], cue)

    def test_event_bounds_and_label_range(self):
        cfg = ft.SynthConfig(k_segments=3, t_frames=2, n_patches=5, dim=8, n_answers=3)
        for seed in range(100):
            s = ft.generate_synthetic(cfg, seed)
            assert 0 <= s.label < 3
            for ev in s.events:
                assert 0 <= ev.segment < 3
                assert 0 <= ev.patch < 5

    def test_tuple_seeds_give_disjoint_streams(self):
        cfg = ft.SynthConfig()
        a = ft.generate_synthetic(cfg, (3, 0))
        b = ft.generate_synthetic(cfg, (3, 1))
        assert a.video.x.data.tobytes() != b.video.x.data.tobytes()

    def test_too_many_answers_rejected(self):
        with pytest.raises(ValueError):
            ft.SynthConfig(n_answers=9, dim=8)

    def test_order_task_needs_two_segments(self):
        with pytest.raises(ValueError):
            ft.SynthConfig(kind=ft.MULTI_EVENT_ORDER, k_segments=1)
