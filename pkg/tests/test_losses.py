import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_rel_error, module_fd_rel_error
from dynstat_ssc.depth import DepthBins
from dynstat_ssc.losses import (
    EPS,
    LossReport,
    LossWeights,
    NonFiniteLossError,
    PointHead,
    depth_bce,
    lovasz_softmax,
    point_loss,
    scal_loss,
    total_loss,
    voxel_ce,
)


def _scal_oracle(probs, labels):
    """Direct transcription with Python floats, sem mode."""
    n, m = len(probs), len(probs[0])
    total, count = 0.0, 0
    for c in range(m):
        pos = [i for i in range(n) if labels[i] == c]
        if not pos:
            continue
        tp = sum(probs[i][c] for i in pos)
        p_sum = sum(probs[i][c] for i in range(n))
        loss = 0.0
        if p_sum > 0:
            loss -= math.log(max(tp / p_sum, EPS))
        loss -= math.log(max(tp / len(pos), EPS))
        neg = [i for i in range(n) if labels[i] != c]
        if neg:
            loss -= math.log(max(sum(1 - probs[i][c] for i in neg) / len(neg), EPS))
        total += loss
        count += 1
    return total / count


def _one_hot(labels, m):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), m).double()


class TestScal:
    def test_exact_prediction_zero(self):
        labels = torch.tensor([0, 1, 2, 1, 0])
        probs = _one_hot(labels, 3)
        assert abs(scal_loss(probs, labels, "sem").item()) < 1e-6
        assert abs(scal_loss(probs, labels, "geo").item()) < 1e-6

    def test_uniform_two_voxel_oracle(self):
        probs = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
        labels = torch.tensor([0, 1])
        ref = _scal_oracle(probs.tolist(), labels.tolist())
        assert abs(scal_loss(probs, labels).item() - ref) < 1e-12
        assert abs(ref - 3 * math.log(2)) < 1e-12

    def test_random_oracle(self):
        g = torch.Generator().manual_seed(0)
        probs = torch.rand(20, 4, generator=g, dtype=torch.float64).softmax(-1)
        labels = torch.randint(0, 4, (20,), generator=g)
        labels[:3] = 255
        keep = labels != 255
        ref = _scal_oracle(probs[keep].tolist(), labels[keep].tolist())
        assert abs(scal_loss(probs, labels).item() - ref) < 1e-10

    def test_geo_collapses_to_binary(self):
        g = torch.Generator().manual_seed(1)
        probs = torch.rand(12, 4, generator=g, dtype=torch.float64).softmax(-1)
        labels = torch.randint(0, 4, (12,), generator=g)
        occ = (labels != 0).double()
        p = 1 - probs[:, 0]
        tp = (p * occ).sum()
        expect = -(torch.log(tp / p.sum()) + torch.log(tp / occ.sum()) + torch.log(((1 - p) * (1 - occ)).sum() / (1 - occ).sum()))
        assert abs(scal_loss(probs, labels, "geo").item() - expect.item()) < 1e-10

    def test_absent_class_skipped_not_nan(self):
        probs = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        out = scal_loss(probs, torch.tensor([0, 1]))
        assert torch.isfinite(out) and abs(out.item()) < 1e-6

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            scal_loss(torch.rand(2, 2), torch.tensor([0, 1]), "bogus")

    @pytest.mark.parametrize("mode", ["sem", "geo"])
    def test_gradient(self, mode):
        g = torch.Generator().manual_seed(2)
        labels = torch.tensor([0, 1, 2, 1, 0, 2, 1, 1, 0])  # 3x3x1 grid
        logits = torch.randn(9, 3, generator=g)
        err = fd_rel_error(lambda x: scal_loss(x.softmax(-1), labels, mode), [logits])
        assert err < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_non_negative(self, seed):
        g = torch.Generator().manual_seed(seed)
        probs = torch.rand(10, 3, generator=g, dtype=torch.float64).softmax(-1)
        labels = torch.randint(0, 3, (10,), generator=g)
        assert scal_loss(probs, labels).item() >= 0
        assert scal_loss(probs, labels, "geo").item() >= 0


def _jaccard_loss(pred_set, gt_set):
    union = pred_set | gt_set
    return 1.0 - (len(pred_set & gt_set) / len(union) if union else 1.0)


class TestLovasz:
    def test_exact_prediction_zero(self):
        labels = torch.tensor([0, 1, 2, 2])
        assert abs(lovasz_softmax(_one_hot(labels, 3), labels).item()) < 1e-6

    @pytest.mark.parametrize("n", [1, 3, 5, 8])
    def test_vertices_equal_jaccard(self, n):
        rs = np.random.default_rng(n)
        m = 3
        for _ in range(30):
            labels = rs.integers(0, m, n)
            pred = rs.integers(0, m, n)
            per_class = lovasz_softmax(_one_hot(pred, m), torch.as_tensor(labels), per_class=True)
            for c in range(m):
                gt_set = {i for i in range(n) if labels[i] == c}
                if not gt_set:
                    assert c not in per_class
                    continue
                pred_set = {i for i in range(n) if pred[i] == c}
                assert abs(per_class[c].item() - _jaccard_loss(pred_set, gt_set)) < 1e-12

    def test_exhaustive_binary_vertices(self):
        # every 0/1 prediction for every labelling of 4 voxels
        n = 4
        for labels in itertools.product([0, 1], repeat=n):
            for pred in itertools.product([0, 1], repeat=n):
                per_class = lovasz_softmax(_one_hot(list(pred), 2), torch.tensor(labels), per_class=True)
                for c, value in per_class.items():
                    gt = {i for i in range(n) if labels[i] == c}
                    pr = {i for i in range(n) if pred[i] == c}
                    assert abs(value.item() - _jaccard_loss(pr, gt)) < 1e-12

    def test_per_class_range(self):
        g = torch.Generator().manual_seed(0)
        probs = torch.rand(30, 4, generator=g, dtype=torch.float64).softmax(-1)
        labels = torch.randint(0, 4, (30,), generator=g)
        for v in lovasz_softmax(probs, labels, per_class=True).values():
            assert 0.0 <= v.item() <= 1.0

    def test_ignore_and_empty(self):
        probs = torch.full((3, 2), 0.5, dtype=torch.float64)
        assert lovasz_softmax(probs, torch.tensor([255, 255, 255])).item() == 0.0

    def test_gradient(self):
        g = torch.Generator().manual_seed(5)
        labels = torch.tensor([0, 1, 2, 1, 0, 2, 1, 2])
        logits = torch.randn(8, 3, generator=g) * 2
        err = fd_rel_error(lambda x: lovasz_softmax(x.softmax(-1), labels), [logits], eps=1e-7)
        assert err < 1e-4


class TestDepthBCE:
    bins = DepthBins(1.0, 9.0, 4)

    def test_matched_one_hot_near_zero(self):
        depth = torch.tensor([[[1.5, 3.5], [5.5, 8.5]]], dtype=torch.float64)
        idx, _ = self.bins.bin_index(depth)
        D = torch.nn.functional.one_hot(idx, 4).permute(0, 3, 1, 2).double()
        loss, ok = depth_bce(D, depth, self.bins)
        assert ok and 0 <= loss.item() <= 4 * -math.log(1 - EPS) + 1e-9

    def test_all_invalid(self):
        depth = torch.tensor([[[0.0, 0.5], [20.0, 0.0]]])
        loss, ok = depth_bce(torch.full((1, 4, 2, 2), 0.25), depth, self.bins)
        assert not ok and loss.item() == 0.0

    def test_loop_oracle(self):
        g = torch.Generator().manual_seed(0)
        D = torch.rand(2, 4, 3, 3, generator=g, dtype=torch.float64).softmax(1)
        depth = torch.rand(2, 3, 3, generator=g, dtype=torch.float64) * 10
        depth[0, 0, 0] = 0.0
        loss, _ = depth_bce(D, depth, self.bins)
        total, count = 0.0, 0
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    d = depth[n, i, j].item()
                    if d == 0 or d < 1.0 or d > 9.0:
                        continue
                    b = min(int((d - 1.0) / 2.0), 3)
                    for k in range(4):
                        p = min(max(D[n, k, i, j].item(), EPS), 1 - EPS)
                        total -= math.log(p) if k == b else math.log(1 - p)
                    count += 1
        assert abs(loss.item() - total / count) < 1e-6

    def test_gradient(self):
        g = torch.Generator().manual_seed(1)
        depth = torch.rand(1, 4, 4, generator=g, dtype=torch.float64) * 7 + 1.5
        err = fd_rel_error(lambda x: depth_bce(x.softmax(1), depth, self.bins)[0],
                           [torch.randn(1, 4, 4, 4, generator=g)])
        assert err < 1e-4


class TestPointLoss:
    def test_saturated_correct(self):
        head = PointHead(4, 3, hidden=3).double()
        labels = torch.tensor([0, 1, 2, 1])
        # identity first layer over the first 3 channels, point features carry the one-hot label
        with torch.no_grad():
            head.mlp[0].weight.zero_()
            head.mlp[0].weight[:, :3] = torch.eye(3)
            head.mlp[0].bias.zero_()
            head.mlp[2].weight.copy_(40 * torch.eye(3))
            head.mlp[2].bias.fill_(-20.0)
        F_point = _one_hot(labels, 3).T[None]
        V_point = torch.zeros(1, 1, 4, dtype=torch.float64)
        ce, lov = point_loss(F_point, V_point, labels, head)
        assert ce.item() < 1e-6 and lov.item() < 1e-6

    def test_random_finite(self):
        torch.manual_seed(0)
        head = PointHead(6, 4)
        ce, lov = point_loss(torch.randn(2, 3, 5), torch.randn(2, 3, 5), torch.randint(0, 4, (2, 5)), head)
        assert torch.isfinite(ce) and torch.isfinite(lov)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            point_loss(torch.randn(1, 2, 5), torch.randn(1, 2, 4), torch.zeros(5), PointHead(4, 2))

    def test_gradient(self):
        torch.manual_seed(0)
        g = torch.Generator().manual_seed(7)
        labels = torch.tensor([0, 1, 2, 1, 2, 0])

        def fn(m, a, b):
            ce, lov = point_loss(a, b, labels, m)
            return torch.stack([ce, lov])

        err = module_fd_rel_error(PointHead(5, 3, hidden=6), fn,
                                  [torch.randn(1, 3, 6, generator=g), torch.randn(1, 2, 6, generator=g)])
        assert err < 1e-4


def test_voxel_ce_gradient_and_ignore():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 3, 3, 3, 1, generator=g)
    labels = torch.randint(0, 3, (1, 3, 3, 1), generator=g)
    assert fd_rel_error(lambda x: voxel_ce(x, labels), [logits]) < 1e-4
    labels_ign = labels.clone()
    labels_ign[0, 0] = 255
    keep = labels_ign != 255
    manual = torch.nn.functional.cross_entropy(logits.permute(0, 2, 3, 4, 1)[keep], labels_ign[keep])
    torch.testing.assert_close(voxel_ce(logits, labels_ign), manual)


def _report(**values):
    names = ["scal_sem", "scal_geo", "ce", "depth_d", "depth_s", "point_ce", "point_lovasz"]
    return LossReport(**{n: torch.tensor(float(values.get(n, 0.0))) for n in names})


class TestTotal:
    def test_zero(self):
        assert total_loss(_report()).item() == 0.0

    def test_ssc_only(self):
        r = _report(scal_sem=1, scal_geo=2, ce=3, depth_d=4, depth_s=5, point_ce=6, point_lovasz=7)
        assert total_loss(r, LossWeights(1.0, 0.0)).item() == 15.0

    def test_weighted(self):
        r = _report(scal_sem=0.25, scal_geo=0.5, ce=1.0, depth_d=0.125, depth_s=2.0, point_ce=0.75, point_lovasz=0.5)
        assert abs(total_loss(r, LossWeights(0.5, 2.0)).item() - (0.5 * 3.875 + 2.0 * 1.25)) < 1e-6

    @pytest.mark.parametrize("name", ["scal_geo", "depth_s", "point_lovasz"])
    def test_nan_names_component(self, name):
        with pytest.raises(NonFiniteLossError, match=name) as exc:
            total_loss(_report(**{name: float("nan")}))
        assert exc.value.component == name

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)
        with pytest.raises(ValueError):
            LossWeights(1.0, float("inf"))

    def test_deterministic(self):
        g = torch.Generator().manual_seed(3)
        probs = torch.rand(50, 4, generator=g).softmax(-1)
        labels = torch.randint(0, 4, (50,), generator=g)
        a = [scal_loss(probs, labels), lovasz_softmax(probs, labels)]
        b = [scal_loss(probs, labels), lovasz_softmax(probs, labels)]
        assert all(torch.equal(x, y) for x, y in zip(a, b))
