import numpy as np
import pytest

from amgformer.errors import ContractError, DataError, ParameterError, ShapeError
from amgformer.evaluation import (StabilityReport, aggregate_stability,
                                  case_region_dice, dice_score,
                                  evaluate_combinations, held_out_bundles,
                                  infer_case, merge_regions, net_forward,
                                  predict_labels, region_mask,
                                  sliding_window_infer, stitch_windows)
from amgformer.network import AmgNet, NetConfig
from amgformer.phantoms import PhantomSpec, enumerate_combinations, generate

from oracles import dice_binary

TINY_NET = dict(scales=2, base_channels=2, input_size=16, heads=2, ratios=(0.5,))
TINY_SPEC = dict(size=16, brain_radius=(5.5, 6.5), wt_radius=(3.0, 4.0),
                 tc_radius=(1.5, 2.0), et_radius=(0.6, 1.0),
                 wt_jitter=1.0, inner_jitter=0.5)

# Published per-combination scores for one model, all 15 combinations; the
# aggregate of each row is known, which pins the aggregator's conventions.
ROWS = {
    "ET": [67.00, 67.34, 67.28, 67.34, 67.20, 67.15, 67.06, 67.28,
           67.39, 67.46, 67.08, 67.09, 67.43, 67.17, 67.12],
    "TC": [82.24, 82.59, 82.61, 82.49, 82.82, 82.11, 82.86, 82.66,
           82.21, 83.13, 83.00, 82.99, 82.85, 82.80, 83.14],
    "WT": [89.39, 89.47, 89.34, 89.32, 89.43, 89.34, 89.22, 89.46,
           89.37, 89.25, 89.23, 89.22, 89.32, 89.40, 89.23],
}


class TestDice:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            p = rng.random((6, 6, 6)) < 0.3
            g = rng.random((6, 6, 6)) < 0.3
            assert dice_score(p, g) == pytest.approx(dice_binary(p, g), abs=1e-12)

    def test_edge_cases(self):
        z = np.zeros((4, 4, 4), dtype=bool)
        o = np.ones((4, 4, 4), dtype=bool)
        assert dice_score(z, z) == 1.0
        assert dice_score(o, o) == 1.0
        assert dice_score(o, z) == 0.0
        half = z.copy()
        half[:2] = True
        assert dice_score(half, o) == pytest.approx(2 * 32 / (32 + 64))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((2, 2, 2), dtype=bool), np.zeros((3, 3, 3), dtype=bool))

    def test_region_masks(self):
        labels = np.array([0, 1, 2, 3])
        assert np.array_equal(region_mask(labels, (1, 2, 3)), [0, 1, 1, 1])
        assert np.array_equal(region_mask(labels, (2, 3)), [0, 0, 1, 1])
        assert np.array_equal(region_mask(labels, (3,)), [0, 0, 0, 1])

    def test_merge_regions_set_oracle(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 4, size=(2, 5, 5, 5))
        regions = merge_regions(labels)
        want = {"WT": {1, 2, 3}, "TC": {2, 3}, "ET": {3}}
        for name, classes in want.items():
            oracle = np.vectorize(lambda v: v in classes)(labels)
            assert np.array_equal(regions[name], oracle)
        assert not (regions["ET"] & ~regions["TC"]).any()
        assert not (regions["TC"] & ~regions["WT"]).any()

    def test_merge_regions_edges(self):
        zero = merge_regions(np.zeros((2, 2, 2), dtype=np.int64))
        assert not any(m.any() for m in zero.values())
        single = np.zeros((2, 2, 2), dtype=np.int64)
        single[0, 0, 0] = 3
        got = merge_regions(single)
        assert all(m.sum() == 1 and m[0, 0, 0] for m in got.values())
        with pytest.raises(DataError):
            merge_regions(np.full((2, 2, 2), 4))
        with pytest.raises(DataError):
            merge_regions(np.zeros((2, 2, 2), dtype=np.float32))

    def test_case_region_dice_perfect(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=(1, 5, 5, 5))
        d = case_region_dice(labels, labels)
        assert d == {"WT": 1.0, "TC": 1.0, "ET": 1.0}

    def test_predict_labels(self):
        logits = np.zeros((1, 4, 2, 2, 2))
        logits[0, 2] = 5.0
        pred = predict_labels(logits)
        assert pred.shape == (1, 2, 2, 2)
        assert (pred == 2).all()


class TestAggregate:
    def test_reproduces_published_aggregates(self):
        agg = aggregate_stability(ROWS)
        assert agg["ET"]["avg"] == pytest.approx(67.23, abs=0.01)
        assert agg["TC"]["avg"] == pytest.approx(82.70, abs=0.01)
        assert agg["WT"]["avg"] == pytest.approx(89.33, abs=0.01)
        assert agg["ET"]["std"] == pytest.approx(0.14, abs=0.01)
        assert agg["ET"]["var"] == pytest.approx(0.02, abs=0.01)
        assert agg["ET"]["min"] == 67.00 and agg["ET"]["max"] == 67.46
        assert agg["WT"]["std"] == pytest.approx(0.09, abs=0.01)
        assert agg["WT"]["var"] == pytest.approx(0.01, abs=0.01)

    def test_min_mean_max_ordering(self):
        rng = np.random.default_rng(3)
        vals = {"WT": list(rng.random(15))}
        agg = aggregate_stability(vals)["WT"]
        assert agg["min"] <= agg["avg"] <= agg["max"]
        assert agg["var"] == pytest.approx(agg["std"] ** 2, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            aggregate_stability({"WT": []})


def constant_head(value=0.0):
    """Mock forward: logits favor class 0 plus a position-independent bump."""
    def fw(tile):
        b, _, d, h, w = tile.shape
        out = np.zeros((b, 4, d, h, w), dtype=tile.dtype)
        out[:, 0] = 1.0 + value
        out[:, 1] = tile[:, 0]
        return out
    return fw


def window_starts_ref(size, window, stride):
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def sliding_ref(fw, vol, window, overlap=0.5):
    b, c, d, h, w = vol.shape
    stride = max(1, int(round(window * (1.0 - overlap))))
    acc = None
    cnt = np.zeros((d, h, w))
    for z in window_starts_ref(d, window, stride):
        for y in window_starts_ref(h, window, stride):
            for x in window_starts_ref(w, window, stride):
                o = fw(vol[:, :, z:z + window, y:y + window, x:x + window])
                if acc is None:
                    acc = np.zeros((b, o.shape[1], d, h, w))
                acc[:, :, z:z + window, y:y + window, x:x + window] += o
                cnt[z:z + window, y:y + window, x:x + window] += 1
    return (acc / cnt).astype(vol.dtype)


class TestSlidingWindow:
    def test_single_window_is_direct_forward(self):
        rng = np.random.default_rng(0)
        vol = rng.normal(size=(1, 4, 16, 16, 16)).astype(np.float32)
        fw = constant_head()
        got = stitch_windows(fw, vol, 16)
        assert np.array_equal(got, fw(vol))

    def test_stitching_matches_accumulation_oracle(self):
        rng = np.random.default_rng(1)
        vol = rng.normal(size=(1, 4, 48, 48, 48)).astype(np.float32)
        fw = constant_head(0.25)
        got = stitch_windows(fw, vol, 32)
        want = sliding_ref(fw, vol, 32)
        assert got.shape == want.shape
        assert np.abs(got - want).max() <= 1e-6

    def test_real_net_stitching(self):
        rng = np.random.default_rng(2)
        net = AmgNet(NetConfig(**TINY_NET), seed=0)
        net.eval()
        vol = rng.normal(size=(1, 4, 12, 12, 12)).astype(np.float32)
        fw = lambda tile: net_forward(net, tile, (True,) * 4)[0]
        got = stitch_windows(fw, vol, 8)
        want = sliding_ref(fw, vol, 8)
        assert np.abs(got - want).max() <= 1e-6

    def test_net_single_window_identity(self):
        net = AmgNet(NetConfig(**TINY_NET), seed=0)
        bundle = generate(PhantomSpec(**TINY_SPEC), seed=5)
        from amgformer.phantoms import normalize_bundle
        normed = normalize_bundle(bundle)
        got, quality = sliding_window_infer(net, normed, 16)
        direct, q_direct = net_forward(net, normed.stacked(), (True,) * 4)
        assert np.array_equal(got, direct)
        assert np.array_equal(quality, q_direct)

    def test_oversized_window_falls_back(self):
        net = AmgNet(NetConfig(**TINY_NET), seed=0)
        bundle = generate(PhantomSpec(**TINY_SPEC), seed=5)
        from amgformer.phantoms import normalize_bundle
        normed = normalize_bundle(bundle)
        got, _ = sliding_window_infer(net, normed, 64)
        direct, _ = net_forward(net, normed.stacked(), (True,) * 4)
        assert np.array_equal(got, direct)

    def test_clamped_last_window(self):
        assert window_starts_ref(33, 32, 16) == [0, 1]
        assert window_starts_ref(48, 32, 16) == [0, 16]
        vol = np.zeros((1, 4, 33, 32, 32), dtype=np.float32)
        got = stitch_windows(constant_head(), vol, 32)
        assert got.shape == (1, 4, 33, 32, 32)
        assert np.allclose(got[:, 0], 1.0)

    def test_bad_params(self):
        vol = np.zeros((1, 4, 8, 8, 8), dtype=np.float32)
        with pytest.raises(ParameterError):
            stitch_windows(constant_head(), vol, 16)
        with pytest.raises(ParameterError):
            stitch_windows(constant_head(), vol, 8, overlap=1.0)
        with pytest.raises(ShapeError):
            stitch_windows(constant_head(), np.zeros((4, 8, 8, 8)), 4)


class TestEvaluateCombinations:
    def setup_method(self):
        self.net = AmgNet(NetConfig(**TINY_NET), seed=0)
        self.spec = PhantomSpec(**TINY_SPEC)
        self.cases = [generate(self.spec, s) for s in (11, 12)]

    def test_report_structure(self):
        rep = evaluate_combinations(self.net, self.cases)
        assert rep.n_cases == 2
        combos = enumerate_combinations()
        assert rep.combos == [[bool(v) for v in c] for c in combos]
        for region in ("WT", "TC", "ET"):
            assert len(rep.per_combo[region]) == 15
            assert all(0.0 <= v <= 1.0 for v in rep.per_combo[region])
            assert len(rep.per_case[region]) == 15
            assert all(len(c) == 2 for c in rep.per_case[region])
            for key in ("avg", "std", "var", "min", "max"):
                assert key in rep.aggregate[region]
        assert len(rep.quality) == 15
        assert all(len(q) == 2 and len(q[0]) == 4 for q in rep.quality)

    def test_per_combo_is_mean_of_cases(self):
        rep = evaluate_combinations(self.net, self.cases)
        for region in ("WT", "TC", "ET"):
            for i in range(15):
                want = float(np.mean(rep.per_case[region][i]))
                assert rep.per_combo[region][i] == pytest.approx(want, rel=1e-12)
        assert rep.aggregate == aggregate_stability(rep.per_combo)

    def test_deterministic_json(self):
        a = evaluate_combinations(self.net, self.cases).to_json()
        b = evaluate_combinations(self.net, self.cases).to_json()
        assert a == b

    def test_json_round_trip(self):
        rep = evaluate_combinations(self.net, self.cases)
        back = StabilityReport.from_json(rep.to_json())
        assert back.to_dict() == rep.to_dict()

    def test_absent_quality_is_zero(self):
        rep = evaluate_combinations(self.net, self.cases)
        combos = enumerate_combinations()
        for i, combo in enumerate(combos):
            for case_q in rep.quality[i]:
                for m in range(4):
                    if not combo[m]:
                        assert case_q[m] == 0.0
                    else:
                        assert 0.0 < case_q[m] < 1.0

    def test_no_mqae_drops_quality(self):
        net = AmgNet(NetConfig(use_mqae=False, **TINY_NET), seed=0)
        rep = evaluate_combinations(net, self.cases[:1])
        assert rep.quality is None

    def test_empty_cases_rejected(self):
        with pytest.raises(ContractError):
            evaluate_combinations(self.net, [])

    def test_incomplete_case_rejected(self):
        from amgformer.phantoms import apply_mask
        partial = apply_mask(self.cases[0], (True, True, True, False))
        with pytest.raises(ContractError):
            evaluate_combinations(self.net, [partial])

    def test_full_only_combination_subset(self):
        rep = evaluate_combinations(self.net, self.cases[:1],
                                    combos=[(True,) * 4])
        assert rep.combos == [[True] * 4]
        assert all(len(v) == 1 for v in rep.per_combo.values())
        full = evaluate_combinations(self.net, self.cases[:1])
        for region in ("WT", "TC", "ET"):
            assert rep.per_combo[region][0] == full.per_combo[region][14]

    def test_meta_round_trip(self):
        rep = evaluate_combinations(self.net, self.cases[:1],
                                    meta={"seed": 3, "checkpoint": "x.ckpt"})
        back = StabilityReport.from_json(rep.to_json())
        assert back.meta == {"seed": 3, "checkpoint": "x.ckpt"}

    def test_infer_case_shapes(self):
        pred, quality = infer_case(self.net, self.cases[0])
        assert pred.shape == (1, 16, 16, 16)
        assert pred.dtype == np.uint8
        assert quality.shape == (1, 4)

    def test_held_out_bundles_deterministic(self):
        a = held_out_bundles(self.spec, seed=0, count=3)
        b = held_out_bundles(self.spec, seed=0, count=3)
        assert len(a) == 3
        for x, y in zip(a, b):
            assert np.array_equal(x.labels, y.labels)
        c = held_out_bundles(self.spec, seed=1, count=3)
        assert not np.array_equal(a[0].labels, c[0].labels)

    def test_training_flag_restored(self):
        self.net.train(True)
        evaluate_combinations(self.net, self.cases[:1])
        assert self.net.training
