import numpy as np
import pytest

from c2fnet.metrics import (
    EmptyDatasetError,
    MaskPair,
    adaptive_threshold,
    e_measure_adaptive,
    evaluate_dataset,
    f_measure_adaptive,
    mae,
    nearest_foreground,
    pair_from_uint8,
    s_measure,
    weighted_f_measure,
)

from transcriptions import (
    ref_e_measure,
    ref_f_measure,
    ref_mae,
    ref_s_measure,
    ref_weighted_f_measure,
)


def random_pair(seed, size=8, frac=None):
    rng = np.random.default_rng(seed)
    pred = rng.random((size, size))
    frac = frac if frac is not None else rng.uniform(0.15, 0.85)
    gt = rng.random((size, size)) < frac
    return MaskPair(pred, gt.astype(np.float64), name=f"r{seed}")


def binary_pair(seed, size=8):
    rng = np.random.default_rng(seed)
    gt = rng.random((size, size)) < 0.4
    if not gt.any():
        gt[0, 0] = True
    if gt.all():
        gt[0, 0] = False
    return MaskPair(gt.astype(np.float64), gt.astype(np.float64), name=f"b{seed}")


# ---------------------------------------------------------------------------
# basic contracts and hand cases
# ---------------------------------------------------------------------------


def test_mae_hand_cases():
    g = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert mae(MaskPair(g.copy(), g)) == 0.0
    assert mae(MaskPair(1.0 - g, g)) == 1.0
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert mae(MaskPair(p, g)) == pytest.approx(0.25)


def test_mae_complement_invariance():
    pair = random_pair(0)
    flipped = MaskPair(1.0 - pair.pred, (~pair.gt).astype(np.float64))
    assert mae(pair) == pytest.approx(mae(flipped), abs=1e-12)


def test_mae_permutation_invariance():
    pair = random_pair(1)
    perm = np.random.default_rng(2).permutation(64)
    p2 = pair.pred.reshape(-1)[perm].reshape(8, 8)
    g2 = pair.gt.reshape(-1)[perm].reshape(8, 8).astype(np.float64)
    assert mae(pair) == pytest.approx(mae(MaskPair(p2, g2)), abs=1e-12)


def test_mae_monotone_toward_truth():
    pair = random_pair(3)
    base = mae(pair)
    p2 = pair.pred.copy()
    p2[4, 4] = 1.0 if pair.gt[4, 4] else 0.0
    assert mae(MaskPair(p2, pair.gt.astype(np.float64))) <= base + 1e-15


def test_pair_validation():
    with pytest.raises(ValueError):
        MaskPair(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        MaskPair(np.zeros((4, 4)), np.full((4, 4), 0.5))


def test_pair_ingestion_clamps_and_thresholds():
    pair = pair_from_uint8(np.array([[0, 255], [128, 64]], dtype=np.uint8),
                           np.array([[0, 255], [128, 127]], dtype=np.uint8))
    assert pair.pred[0, 1] == 1.0
    assert pair.gt.tolist() == [[False, True], [True, False]]


def test_perfect_prediction_scores_one_everywhere():
    for seed in range(5):
        pair = binary_pair(seed)
        assert mae(pair) == 0.0
        assert s_measure(pair) == 1.0
        assert f_measure_adaptive(pair) == 1.0
        assert weighted_f_measure(pair) == 1.0
        assert e_measure_adaptive(pair) == 1.0


def test_s_measure_degenerate_rules():
    pred = np.full((6, 6), 0.3)
    empty = MaskPair(pred, np.zeros((6, 6)))
    assert s_measure(empty) == pytest.approx(0.7, abs=1e-12)
    full = MaskPair(pred, np.ones((6, 6)))
    assert s_measure(full) == pytest.approx(0.3, abs=1e-12)


def test_f_measure_hand_case():
    pred = np.array([[0.8, 0.6], [0.1, 0.0]])
    gt = np.array([[1.0, 1.0], [0.0, 0.0]])
    pair = MaskPair(pred, gt)
    assert adaptive_threshold(pair.pred) == pytest.approx(0.75)
    assert f_measure_adaptive(pair) == pytest.approx(0.8125, abs=1e-15)


def test_f_measure_zero_prediction():
    gt = np.zeros((4, 4))
    gt[1, 1] = 1.0
    pair = MaskPair(np.zeros((4, 4)), gt)
    assert f_measure_adaptive(pair) == 0.0


def test_f_measure_one_iff_binarization_matches():
    pair = binary_pair(7)
    assert f_measure_adaptive(pair) == 1.0
    p2 = pair.pred.copy()
    flip = np.argwhere(~pair.gt)[0]
    p2[flip[0], flip[1]] = 1.0
    assert f_measure_adaptive(MaskPair(p2, pair.gt.astype(np.float64))) < 1.0


def test_weighted_f_zero_prediction_and_empty_gt():
    gt = np.zeros((6, 6))
    gt[2:4, 2:4] = 1.0
    assert weighted_f_measure(MaskPair(np.zeros((6, 6)), gt)) < 1e-12
    assert weighted_f_measure(MaskPair(np.ones((6, 6)), np.zeros((6, 6)))) == 0.0


def test_e_measure_perfect_and_inverted():
    gt = np.kron(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones((1, 1)))
    pair = MaskPair(gt.copy(), gt)
    assert e_measure_adaptive(pair) == 1.0
    inverted = MaskPair(1.0 - gt, gt)
    assert e_measure_adaptive(inverted) == pytest.approx(0.0, abs=1e-12)


def test_e_measure_degenerate_rules():
    pred = np.zeros((4, 4))
    pred[0, 0] = 1.0
    pair = MaskPair(pred, np.zeros((4, 4)))
    assert e_measure_adaptive(pair) == pytest.approx(15.0 / 16.0)
    pair_full = MaskPair(pred, np.ones((4, 4)))
    assert e_measure_adaptive(pair_full) == pytest.approx(1.0 / 16.0)


def test_all_measures_in_unit_interval():
    for seed in range(30):
        pair = random_pair(seed)
        for fn in (mae, s_measure, f_measure_adaptive, weighted_f_measure, e_measure_adaptive):
            v = fn(pair)
            assert 0.0 <= v <= 1.0, (fn.__name__, v)


# ---------------------------------------------------------------------------
# nearest-foreground assignment
# ---------------------------------------------------------------------------


def test_nearest_foreground_ties_break_by_flat_index():
    gt = np.zeros((3, 3), dtype=bool)
    gt[0, 2] = True
    gt[2, 0] = True
    d2, idx = nearest_foreground(gt)
    # center pixel is equidistant; the smaller flat index (0,2) wins
    assert d2[1, 1] == 2
    assert idx[1, 1] == 2


def test_nearest_foreground_matches_bruteforce():
    rng = np.random.default_rng(11)
    gt = rng.random((9, 7)) < 0.3
    gt[0, 0] = True
    d2, idx = nearest_foreground(gt, chunk=5)
    fg = np.argwhere(gt)
    for i in range(9):
        for j in range(7):
            best = None
            for fi, fj in fg:
                key = ((i - fi) ** 2 + (j - fj) ** 2, fi * 7 + fj)
                if best is None or key < best:
                    best = key
            assert d2[i, j] == best[0]
            assert idx[i, j] == best[1]


# ---------------------------------------------------------------------------
# transcription oracle agreement
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(40))
def test_dual_implementation_agreement(seed):
    pair = random_pair(seed)
    pred = pair.pred.tolist()
    gt = pair.gt.tolist()
    assert abs(mae(pair) - ref_mae(pred, gt)) < 1e-9
    assert abs(s_measure(pair) - ref_s_measure(pred, gt)) < 1e-9
    assert abs(f_measure_adaptive(pair) - ref_f_measure(pred, gt)) < 1e-9
    assert abs(weighted_f_measure(pair) - ref_weighted_f_measure(pred, gt)) < 1e-9
    assert abs(e_measure_adaptive(pair) - ref_e_measure(pred, gt)) < 1e-9


def test_dual_agreement_near_binary_predictions():
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        gt = rng.random((8, 8)) < 0.4
        pred = np.clip(gt + rng.normal(0, 0.15, (8, 8)), 0, 1)
        pair = MaskPair(pred, gt.astype(np.float64))
        pl, gl = pair.pred.tolist(), pair.gt.tolist()
        assert abs(s_measure(pair) - ref_s_measure(pl, gl)) < 1e-9
        assert abs(weighted_f_measure(pair) - ref_weighted_f_measure(pl, gl)) < 1e-9
        assert abs(e_measure_adaptive(pair) - ref_e_measure(pl, gl)) < 1e-9


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_singleton_dataset_means():
    pair = random_pair(5)
    report = evaluate_dataset([pair])
    assert report.count == 1
    assert report.mean("mae") == pytest.approx(mae(pair))


def test_duplicated_samples_leave_means_unchanged():
    pair = random_pair(6)
    single = evaluate_dataset([pair])
    triple = evaluate_dataset(
        [MaskPair(pair.pred, pair.gt.astype(np.float64), name=f"s{i}") for i in range(3)]
    )
    for key in ("mae", "s", "f", "fw", "e"):
        assert triple.mean(key) == pytest.approx(single.mean(key), abs=1e-12)


def test_report_order_independent():
    pairs = [random_pair(seed) for seed in range(6)]
    a = evaluate_dataset(pairs).to_tsv()
    b = evaluate_dataset(list(reversed(pairs))).to_tsv()
    assert a == b


def test_report_tsv_shape():
    report = evaluate_dataset([random_pair(7), random_pair(8)])
    lines = report.to_tsv().strip().split("\n")
    assert lines[0] == "name\tM\tS\tF\tFw\tE"
    assert len(lines) == 4
    assert lines[-1].startswith("MEAN\t")


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDatasetError):
        evaluate_dataset([])


def test_thread_cap_env_does_not_change_results(monkeypatch):
    pairs = [random_pair(seed) for seed in range(5)]
    monkeypatch.setenv("C2F_THREADS", "1")
    seq = evaluate_dataset(pairs).to_tsv()
    monkeypatch.setenv("C2F_THREADS", "2")
    par = evaluate_dataset(pairs).to_tsv()
    assert seq == par
