import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frucforge import fcdnet, traineval
from frucforge.errors import InvalidInputError, OutOfRangeError
from frucforge.fcdnet import NetConfig, build, classify
from frucforge.preprocess import (LABEL_FORGED, LABEL_ORIGINAL, ResidualStack,
                                  StackOrigin, STACK_FRAMES)
from frucforge.traineval import (build_synth_pairs, compute_metrics, detect,
                                 localize, majority_vote, make_spliced_video,
                                 pair_up, train)
from frucforge.video import synth_video


def tiny_config(seed=0, crop=16):
    return NetConfig(crop_size=crop, block1_count=1, block1_channels=10,
                     block2_count=1, block2_channels=8,
                     block3_channel_plan=(8, 12), seed=seed)


def make_pair(rng, crop=16, start=0, video_id="v"):
    origin = StackOrigin(video_id, start, 0, 0)
    a = ResidualStack(rng.normal(scale=0.1, size=(5, crop, crop)).astype(np.float32),
                      origin, label=LABEL_ORIGINAL)
    b = ResidualStack(rng.normal(scale=0.3, size=(5, crop, crop)).astype(np.float32),
                      origin, label=LABEL_FORGED)
    return a, b


class TestMetrics:
    def test_all_correct_both_classes(self):
        report = compute_metrics([0, 0, 1, 1], [0, 0, 1, 1])
        assert (report.tnr, report.tpr, report.f1) == (100.0, 100.0, 100.0)
        assert report.undefined == ()

    def test_confusion_example(self):
        preds = [1] * 9 + [0] + [1] * 2 + [0] * 8
        labels = [1] * 10 + [0] * 10
        report = compute_metrics(preds, labels)
        assert (report.tp, report.fn, report.fp, report.tn) == (9, 1, 2, 8)
        assert report.tnr == pytest.approx(80.00, abs=0.01)
        assert report.recall == pytest.approx(90.00, abs=0.01)
        assert report.precision == pytest.approx(81.82, abs=0.01)
        assert report.f1 == pytest.approx(85.71, abs=0.01)

    def test_no_positive_ground_truth_flags_recall(self):
        report = compute_metrics([0, 1], [0, 0])
        assert math.isnan(report.recall)
        assert "recall" in report.undefined
        assert math.isnan(report.f1)

    def test_no_positive_predictions_flags_precision(self):
        report = compute_metrics([0, 0], [0, 1])
        assert math.isnan(report.precision)
        assert "precision" in report.undefined

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)),
                    min_size=1, max_size=40))
    def test_f1_algebraic_identity(self, rows):
        preds = [p for p, _ in rows]
        labels = [l for _, l in rows]
        report = compute_metrics(preds, labels)
        denom = 2 * report.tp + report.fp + report.fn
        if denom == 0:
            assert math.isnan(report.f1)
        elif math.isnan(report.f1):
            # harmonic mean undefined when precision or recall is undefined
            assert math.isnan(report.precision) or math.isnan(report.recall) \
                or report.precision + report.recall == 0
        else:
            assert report.f1 == pytest.approx(100.0 * 2 * report.tp / denom)

    def test_validations(self):
        with pytest.raises(InvalidInputError):
            compute_metrics([], [])
        with pytest.raises(InvalidInputError):
            compute_metrics([0, 1], [0])
        with pytest.raises(InvalidInputError):
            compute_metrics([0, 2], [0, 1])


class TestMajorityVote:
    def test_exhaustive_up_to_13(self):
        for n in range(1, 14):
            for votes in itertools.product((0, 1), repeat=n):
                forged = sum(votes)
                expected = 1 if forged > n - forged else (1 if forged == n - forged else 0)
                assert majority_vote(list(votes)) == expected

    def test_six_of_nine_forged(self):
        assert majority_vote([1, 1, 1, 1, 1, 1, 0, 0, 0]) == 1

    def test_even_tie_is_forged(self):
        assert majority_vote([0, 1, 0, 1]) == 1


class TestDetect:
    @pytest.fixture(scope="class")
    @staticmethod
    def net():
        return build(tiny_config())

    @pytest.fixture(scope="class")
    @staticmethod
    def video():
        return synth_video(16, 16, 30, 40, "textured-noise",
                           motion="translate:1,0", noise_sigma=3.0, seed=4)

    def test_single_stack_reduces_to_argmax(self, net, video):
        verdict = detect(net, video, n_stacks=1, seed=5)
        assert verdict.decision == classify(verdict.probs[0])

    def test_decision_matches_vote_count(self, net, video):
        verdict = detect(net, video, n_stacks=9, seed=2)
        assert len(verdict.votes) == 9
        assert verdict.decision == majority_vote(verdict.votes)

    def test_identical_stacks_on_flat_video(self, net, flat_video):
        verdict = detect(net, flat_video, n_stacks=9, seed=0)
        assert len(set(verdict.votes.tolist())) == 1
        assert verdict.decision == verdict.votes[0]

    def test_short_video_rejected(self, net):
        short = synth_video(16, 16, 30, 6, "checker")
        from frucforge.video import Video
        clipped = Video(short.frames[:5], short.fps)
        with pytest.raises(OutOfRangeError, match="6"):
            detect(net, clipped)

    def test_deterministic(self, net, video):
        a = detect(net, video, n_stacks=5, seed=9)
        b = detect(net, video, n_stacks=5, seed=9)
        np.testing.assert_array_equal(a.probs, b.probs)


class TestLocalize:
    def test_window_and_frame_counts(self):
        net = build(tiny_config())
        video = synth_video(16, 16, 30, 100, "textured-noise",
                            motion="translate:1,0", noise_sigma=2.0, seed=1)
        windows, frames = localize(net, video)
        assert len(windows) == 95
        assert len(frames) == 100

    def test_frame_scores_average_covering_windows(self):
        net = build(tiny_config())
        video = synth_video(16, 16, 30, 10, "textured-noise",
                            motion="translate:1,0", noise_sigma=2.0, seed=2)
        windows, frames = localize(net, video)
        # frame 0 is covered only by window 0; frame 5 by windows 0..4
        assert frames[0] == pytest.approx(windows[0])
        assert frames[5] == pytest.approx(np.mean(windows[0:5]))


class TestPairing:
    def test_pair_up_matches_by_position(self, rng):
        a0, f0 = make_pair(rng, start=0)
        a1, f1 = make_pair(rng, start=3)
        unmatched = ResidualStack(np.zeros((5, 16, 16), np.float32),
                                  StackOrigin("other", 9, 0, 0), label=LABEL_FORGED)
        pairs = pair_up([f1, a0, unmatched, a1, f0])
        assert len(pairs) == 2
        assert all(o.origin == f.origin for o, f in pairs)
        assert all(o.label == LABEL_ORIGINAL and f.label == LABEL_FORGED
                   for o, f in pairs)

    def test_build_synth_pairs_invariants(self):
        pairs, cases = build_synth_pairs(4, seed=5, crop=16, stacks_per_video=2)
        assert len(pairs) == 8
        for orig, forged in pairs:
            assert orig.origin.start_frame == forged.origin.start_frame
            assert orig.origin.video_id == forged.origin.video_id
            assert orig.label == LABEL_ORIGINAL and forged.label == LABEL_FORGED
            assert orig.planes.shape == (5, 16, 16)
        for case in cases:
            assert len(case.original) == len(case.forged)
            assert sum(case.forged_mask) > 0

    def test_build_synth_pairs_deterministic(self):
        a, _ = build_synth_pairs(2, seed=8, crop=16)
        b, _ = build_synth_pairs(2, seed=8, crop=16)
        for (ao, af), (bo, bf) in zip(a, b):
            np.testing.assert_array_equal(ao.planes, bo.planes)
            np.testing.assert_array_equal(af.planes, bf.planes)


class TestTrain:
    def test_zero_lr_leaves_parameters_unchanged(self, rng):
        net = build(tiny_config())
        before = {p.name: p.value.copy() for p in net.store.params()}
        pairs = [make_pair(rng) for _ in range(4)]
        train(net, pairs, epochs=1, lr=0.0, weight_decay=0.0, batch_size=4, seed=0)
        for p in net.store.params():
            np.testing.assert_array_equal(p.value, before[p.name])

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidInputError):
            train(build(tiny_config()), [], epochs=1)

    def test_mismatched_pair_rejected(self, rng):
        a, _ = make_pair(rng, start=0)
        _, f = make_pair(rng, start=2)
        with pytest.raises(InvalidInputError):
            train(build(tiny_config()), [(a, f)], epochs=1)

    def test_deterministic_history(self, rng):
        pairs = [make_pair(rng) for _ in range(4)]
        hists = []
        for _ in range(2):
            net = build(tiny_config(seed=1))
            res = train(net, pairs, epochs=2, batch_size=4, seed=3)
            hists.append([r["train_loss"] for r in res.history])
        assert hists[0] == hists[1]

    def test_memorizes_single_pair(self):
        # one pair, repeated steps: training loss collapses near zero
        pairs, _ = build_synth_pairs(1, seed=0, crop=32, stacks_per_video=1,
                                     schemes=("nni",), fps_pairs=((15, 30),))
        net = build(fcdnet.desk_config(seed=0, crop_size=32))
        res = train(net, pairs, epochs=200, lr=1e-3, weight_decay=0.0,
                    batch_size=2, seed=0)
        assert res.history[-1]["train_loss"] < 0.05

    def test_best_validation_state_restored(self, rng):
        pairs = [make_pair(rng, start=i) for i in range(4)]
        net = build(tiny_config())
        res = train(net, pairs[:3], epochs=3, batch_size=2, seed=0,
                    val_pairs=pairs[3:])
        assert res.best_epoch >= -1
        assert len(res.history) == 3


class TestSplicedVideo:
    def test_segments_and_mask(self):
        video, mask = make_spliced_video(seed=1, size=16,
                                         segment_frames=(8, 10, 8))
        assert len(video) == 26
        assert len(mask) == 26
        assert not any(mask[:8]) and not any(mask[18:])
        assert sum(mask[8:18]) > 0
