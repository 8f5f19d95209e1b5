""" Tests for commandline scripts """
import argparse
import json
import os
import shutil
import tempfile
import unittest
from io import StringIO

from mock import patch

from crossmodal_seg import scripts
from crossmodal_seg.data import load_refcoco_dir
from crossmodal_seg.exceptions import UsageError
from crossmodal_seg.storage import FileStorage
from crossmodal_seg.util import CACHE_ENV

TINY = [
    "--preset",
    "toy",
    "--set",
    "encoder.image_size=32",
    "--set",
    "encoder.stage_channels=[8, 16, 32, 64]",
    "--set",
    "encoder.text_dim=16",
    "--batch-size",
    "4",
]


class TestConfigArgs(unittest.TestCase):

    """Tests for building a config from the commandline"""

    def _args(self, argv):
        parser = argparse.ArgumentParser()
        scripts._add_config_args(parser)
        return parser.parse_args(argv)

    def test_parse_set(self):
        """--set values parse as JSON where possible"""
        overrides = scripts.parse_set_args(["epochs=3", "device=cpu", "data.hflip=true"])
        self.assertEqual(overrides, {"epochs": 3, "device": "cpu", "data.hflip": True})

    def test_parse_set_needs_equals(self):
        """A --set without '=' is a usage error"""
        with self.assertRaises(UsageError):
            scripts.parse_set_args(["epochs"])

    def test_flags_beat_set(self):
        """Dedicated flags win over --set"""
        args = self._args(["--preset", "toy", "--set", "epochs=3", "--epochs", "5", "--lr", "0.1"])
        cfg = scripts.config_from_args(args)
        self.assertEqual(cfg.epochs, 5)
        self.assertEqual(cfg.optimizer.lr, 0.1)
        self.assertEqual(cfg.encoder.image_size, 64)

    def test_data_root(self):
        """--data sets data.root"""
        cfg = scripts.config_from_args(self._args(["--data", "/tmp/x"]))
        self.assertEqual(cfg.data.root, "/tmp/x")

    def test_default_dataset_root(self):
        """Without a data root the dataset cache is used"""
        tempdir = tempfile.mkdtemp()
        try:
            with patch.dict(os.environ, {CACHE_ENV: tempdir}):
                cfg = scripts.config_from_args(self._args([]))
                self.assertEqual(
                    scripts._dataset_root(cfg), os.path.join(tempdir, "synthetic")
                )
        finally:
            shutil.rmtree(tempdir)


class TestCheckpointLocation(unittest.TestCase):

    """Tests for resolving checkpoint paths"""

    def test_file(self):
        """A local path is a directory plus a checkpoint name"""
        tempdir = tempfile.mkdtemp()
        try:
            storage, name = scripts.checkpoint_location(os.path.join(tempdir, "run", "best/"))
            self.assertEqual(name, "best")
            self.assertIsInstance(storage, FileStorage)
            self.assertEqual(storage.directory, os.path.join(tempdir, "run"))
        finally:
            shutil.rmtree(tempdir)

    @patch("crossmodal_seg.scripts.get_storage_impl")
    def test_s3(self, get_storage_impl):
        """An s3:// URL is a bucket, a prefix and a name"""
        _, name = scripts.checkpoint_location("s3://bucket/runs/exp/last")
        self.assertEqual(name, "last")
        get_storage_impl.assert_called_once_with(
            {"storage.backend": "s3", "storage.bucket": "bucket", "storage.prefix": "runs/exp"}
        )


class TestCommands(unittest.TestCase):

    """Run the commands end to end on a tiny dataset"""

    def setUp(self):
        super(TestCommands, self).setUp()
        self.tempdir = tempfile.mkdtemp()
        self.data = os.path.join(self.tempdir, "data")
        self.runs = os.path.join(self.tempdir, "runs")
        patch("crossmodal_seg.scripts.logging.basicConfig").start()
        self.stdout = patch("sys.stdout", new_callable=StringIO).start()
        scripts.make_synthetic(["--out", self.data, "--count", "16"])

    def tearDown(self):
        super(TestCommands, self).tearDown()
        patch.stopall()
        shutil.rmtree(self.tempdir)

    def test_make_synthetic(self):
        """make-synthetic writes a loadable dataset"""
        triplets = load_refcoco_dir(self.data)
        self.assertEqual(len(triplets), 16)
        self.assertIn("Wrote 16 triplets", self.stdout.getvalue())

    def test_make_synthetic_rle(self):
        """Masks can be written inline"""
        out = os.path.join(self.tempdir, "rle")
        scripts.make_synthetic(["--out", out, "--count", "4", "--mask-format", "rle"])
        with open(os.path.join(out, "annotations.json")) as ifile:
            records = json.load(ifile)["records"]
        self.assertTrue(all(isinstance(r["mask"], dict) for r in records))

    def test_train_evaluate_predict(self):
        """train, evaluate and predict chain through the checkpoint directory"""
        scripts.train(
            TINY + ["--data", self.data, "--epochs", "1", "--set", "output_dir=%s" % self.runs]
        )
        self.assertIn("Best val mIoU", self.stdout.getvalue())
        checkpoint = os.path.join(self.runs, "run", "best")
        self.assertTrue(os.path.exists(os.path.join(checkpoint, "manifest.json")))

        report_path = os.path.join(self.tempdir, "report.json")
        scripts.evaluate(
            ["--checkpoint", checkpoint, "--data", self.data, "--split", "val", "--json", report_path]
        )
        with open(report_path) as ifile:
            self.assertEqual(json.load(ifile)["count"], 2)
        self.assertIn("oIoU", self.stdout.getvalue())

        image = os.path.join(self.data, "images", "syn-0-00000.png")
        scripts.predict(["--checkpoint", checkpoint, "--image", image, "--expr", "the circle", "--overlay"])
        self.assertTrue(os.path.exists(os.path.join(self.data, "images", "syn-0-00000_mask.png")))
        self.assertTrue(os.path.exists(os.path.join(self.data, "images", "syn-0-00000_overlay.png")))

    def test_error_exit(self):
        """Library errors exit with status 1"""
        with self.assertRaises(SystemExit) as cm:
            scripts.evaluate(
                ["--checkpoint", os.path.join(self.runs, "missing"), "--data", self.data]
            )
        self.assertEqual(cm.exception.code, 1)

    def test_unknown_command(self):
        """main() rejects unknown commands"""
        with patch("sys.stderr", new_callable=StringIO):
            with self.assertRaises(SystemExit) as cm:
                scripts.main(["frobnicate"])
        self.assertEqual(cm.exception.code, 2)

    def test_main_dispatch(self):
        """main() dispatches to the subcommand"""
        out = os.path.join(self.tempdir, "more")
        scripts.main(["make-synthetic", "--out", out, "--count", "4"])
        self.assertEqual(len(load_refcoco_dir(out)), 4)
