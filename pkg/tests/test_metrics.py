""" Tests for the evaluation metrics """
import json
import random
import unittest

import numpy as np
import torch

from crossmodal_seg.exceptions import InputError, UsageError
from crossmodal_seg.metrics import EvalAccumulator, percent, render_table, sample_iou


def _count_pixels(pred, gt):
    """Brute-force intersection and union"""
    inter = union = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            inter += int(pred[i, j] and gt[i, j])
            union += int(pred[i, j] or gt[i, j])
    return inter, union


class TestSampleIoU(unittest.TestCase):

    """Tests for sample_iou"""

    def test_pixel_oracle(self):
        """Counts match the double loop on random masks"""
        rng = np.random.RandomState(0)
        for _ in range(200):
            pred = rng.rand(8, 8) > rng.rand()
            gt = rng.rand(8, 8) > rng.rand()
            inter, union, iou = sample_iou(pred, gt)
            self.assertEqual((inter, union), _count_pixels(pred, gt))
            if union:
                self.assertEqual(iou, inter / union)

    def test_identical(self):
        """Equal nonempty masks have IoU 1"""
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        self.assertEqual(sample_iou(mask, mask)[2], 1.0)

    def test_disjoint(self):
        """Disjoint masks have IoU 0"""
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        self.assertEqual(sample_iou(a, b)[2], 0.0)

    def test_overlapping_blocks(self):
        """Two 2x2 blocks sharing two pixels give 1/3"""
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0:2, 0:2] = 1
        b[0:2, 1:3] = 1
        self.assertEqual(sample_iou(a, b), (2, 6, 1 / 3))

    def test_empty_pair(self):
        """Empty prediction and ground truth use the configured IoU"""
        empty = np.zeros((3, 3))
        self.assertEqual(sample_iou(empty, empty), (0, 0, 1.0))
        self.assertEqual(sample_iou(empty, empty, empty_iou=0.0)[2], 0.0)

    def test_accepts_tensors(self):
        """Torch tensors are accepted"""
        mask = torch.ones(2, 2, dtype=torch.long)
        self.assertEqual(sample_iou(mask, mask)[:2], (4, 4))

    def test_shape_mismatch(self):
        """Masks must have the same dims"""
        with self.assertRaises(InputError):
            sample_iou(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_binary(self):
        """Masks must be binary"""
        with self.assertRaises(InputError):
            sample_iou(np.full((2, 2), 2), np.zeros((2, 2)))


class TestEvalAccumulator(unittest.TestCase):

    """Tests for EvalAccumulator"""

    def test_fixture(self):
        """(1, 2) and (3, 3) give mIoU 0.75 and oIoU 0.8"""
        acc = EvalAccumulator()
        acc.add_counts(1, 2)
        acc.add_counts(3, 3)
        report = acc.finalize()
        self.assertAlmostEqual(report.miou, 0.75, delta=1e-9)
        self.assertAlmostEqual(report.oiou, 0.8, delta=1e-9)
        self.assertEqual(report.count, 2)

    def test_strict_threshold(self):
        """Pr@X counts IoUs strictly above X"""
        acc = EvalAccumulator()
        for _ in range(4):
            acc.add_counts(11, 20)
        report = acc.finalize()
        self.assertEqual(report.pr_at[0.5], 100.0)
        self.assertEqual(report.pr_at[0.6], 0.0)

    def test_exact_threshold_excluded(self):
        """An IoU equal to the threshold does not count"""
        acc = EvalAccumulator()
        acc.add_counts(1, 2)
        self.assertEqual(acc.finalize().pr_at[0.5], 0.0)

    def test_monotone(self):
        """Pr@X never increases with X"""
        rng = random.Random(0)
        for _ in range(100):
            acc = EvalAccumulator()
            for _ in range(rng.randint(1, 30)):
                union = rng.randint(0, 50)
                acc.add_counts(rng.randint(0, union), union)
            values = list(acc.finalize().pr_at.values())
            self.assertEqual(values, sorted(values, reverse=True))

    def test_perfect_predictions(self):
        """Predictions equal to the ground truth score 100 everywhere"""
        acc = EvalAccumulator()
        rng = np.random.RandomState(1)
        for _ in range(5):
            mask = rng.rand(6, 6) > 0.5
            mask[0, 0] = True
            acc.add(mask, mask)
        report = acc.finalize()
        self.assertEqual(report.miou, 1.0)
        self.assertEqual(report.oiou, 1.0)
        self.assertTrue(all(v == 100.0 for v in report.pr_at.values()))

    def test_empty_pair_counts_for_miou_only(self):
        """An empty pair adds 1 to mIoU and nothing to the oIoU sums"""
        acc = EvalAccumulator()
        acc.add(np.zeros((2, 2)), np.zeros((2, 2)))
        acc.add_counts(1, 4)
        report = acc.finalize()
        self.assertAlmostEqual(report.miou, 0.625, delta=1e-9)
        self.assertAlmostEqual(report.oiou, 0.25, delta=1e-9)

    def test_finalize_empty(self):
        """An empty accumulator cannot be finalized"""
        with self.assertRaises(UsageError):
            EvalAccumulator().finalize()

    def test_bad_counts(self):
        """Intersection may not exceed union"""
        with self.assertRaises(InputError):
            EvalAccumulator().add_counts(3, 2)

    def test_order_independent(self):
        """Reordering samples leaves the report unchanged"""
        rng = random.Random(3)
        counts = []
        for _ in range(20):
            union = rng.randint(1, 40)
            counts.append((rng.randint(0, union), union))
        a, b = EvalAccumulator(), EvalAccumulator()
        for inter, union in counts:
            a.add_counts(inter, union)
        rng.shuffle(counts)
        for inter, union in counts:
            b.add_counts(inter, union)
        self.assertEqual(a.finalize(), b.finalize())

    def test_merge(self):
        """Merging shards equals accumulating everything at once"""
        whole, left, right = EvalAccumulator(), EvalAccumulator(), EvalAccumulator()
        for i, (inter, union) in enumerate([(1, 2), (0, 5), (3, 3), (2, 7)]):
            whole.add_counts(inter, union, "a" if i % 2 else "b")
            (left if i < 2 else right).add_counts(inter, union, "a" if i % 2 else "b")
        self.assertEqual(left.merge(right).finalize(), whole.finalize())

    def test_merge_settings(self):
        """Accumulators with different thresholds do not merge"""
        with self.assertRaises(UsageError):
            EvalAccumulator().merge(EvalAccumulator(thresholds=[0.5]))

    def test_per_category(self):
        """Categories get their own reports"""
        acc = EvalAccumulator()
        acc.add_counts(1, 1, "circle")
        acc.add_counts(0, 1, "square")
        acc.add_counts(1, 2, "square")
        report = acc.finalize()
        self.assertEqual(sorted(report.per_category), ["circle", "square"])
        self.assertEqual(report.per_category["circle"].miou, 1.0)
        self.assertAlmostEqual(report.per_category["square"].miou, 0.25, delta=1e-9)
        self.assertEqual(report.per_category["square"].count, 2)


class TestReport(unittest.TestCase):

    """Tests for report formatting"""

    def setUp(self):
        super(TestReport, self).setUp()
        acc = EvalAccumulator()
        acc.add_counts(1, 2, "circle")
        acc.add_counts(3, 3, "square")
        self.report = acc.finalize()

    def test_percent_rounding(self):
        """Percentages round half-up to two decimals"""
        self.assertEqual(percent(0.75), "75.00")
        self.assertEqual(percent(2 / 3), "66.67")
        self.assertEqual(percent(1 / 3), "33.33")

    def test_column_order(self):
        """Columns run Pr@0.5..Pr@0.9, mIoU, oIoU"""
        self.assertEqual(
            list(self.report.row()),
            ["Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "mIoU", "oIoU"],
        )
        self.assertEqual(self.report.row()["mIoU"], "75.00")
        self.assertEqual(self.report.row()["oIoU"], "80.00")

    def test_json(self):
        """JSON output carries ratios, percentages and categories"""
        data = json.loads(self.report.to_json())
        self.assertEqual(data["count"], 2)
        self.assertAlmostEqual(data["miou"], 0.75)
        self.assertEqual(data["pr_at"]["0.5"], 50.0)
        self.assertEqual(sorted(data["per_category"]), ["circle", "square"])

    def test_table(self):
        """The text table has a header, a rule and one row per category plus total"""
        table = self.report.to_table("val")
        self.assertTrue(table.endswith("\n"))
        self.assertFalse(table.endswith("\n\n"))
        lines = table.splitlines()
        self.assertEqual(lines[0], "val")
        self.assertTrue(lines[1].startswith("name"))
        self.assertTrue(set(lines[2]) <= {"-", " "})
        self.assertEqual([line.split()[0] for line in lines[3:]], ["all", "circle", "square"])
        self.assertEqual(len({len(line) for line in lines[1:]}), 1)

    def test_render_empty(self):
        """There must be something to render"""
        with self.assertRaises(UsageError):
            render_table([])
