""" Tests for crossmodal_seg utilities """
import os
import shutil
import tempfile
import unittest

from mock import patch

from crossmodal_seg import util


class TestSettings(unittest.TestCase):

    """Tests for get_settings and the environment overrides"""

    def test_get_settings_converts(self):
        """Values are run through their converter"""
        settings = {"optimizer.lr": "0.5", "optimizer.kind": "adamw"}
        ret = util.get_settings(settings, "optimizer.", lr=float, kind=str)
        self.assertEqual(ret, {"lr": 0.5, "kind": "adamw"})

    def test_get_settings_missing(self):
        """Missing settings are left out instead of set to None"""
        ret = util.get_settings({}, "optimizer.", lr=float)
        self.assertEqual(ret, {})

    def test_get_settings_ignores_environment(self):
        """get_settings reads only the settings it is given"""
        with patch.dict(os.environ, {"CMS_OPTIMIZER_LR": "0.25"}):
            ret = util.get_settings({"optimizer.lr": 1}, "optimizer.", lr=float)
        self.assertEqual(ret, {"lr": 1.0})

    def test_get_environ_settings(self):
        """CMS_* variables are collected for the requested keys only"""
        env = {"CMS_OPTIMIZER_LR": "0.25", "CMS_EPOCHS": "3"}
        with patch.dict(os.environ, env):
            ret = util.get_environ_settings(["optimizer.lr", "seed"])
        self.assertEqual(ret, {"optimizer.lr": "0.25"})
        self.assertEqual(util.environ_key("smgam.project_residual"), "CMS_SMGAM_PROJECT_RESIDUAL")

    def test_flatten(self):
        """Nested mappings become dotted keys; lists stay values"""
        flat = util.flatten_settings({"a": {"b": 1, "c": [1, 2]}, "d": "x"})
        self.assertEqual(flat, {"a.b": 1, "a.c": [1, 2], "d": "x"})

    def test_parse_override(self):
        """Override values parse as JSON and fall back to strings"""
        self.assertEqual(util.parse_override("3"), 3)
        self.assertEqual(util.parse_override("[8, 16]"), [8, 16])
        self.assertEqual(util.parse_override("true"), True)
        self.assertEqual(util.parse_override("cuda:0"), "cuda:0")

    def test_aslist_of(self):
        """Comma or space separated strings convert to typed lists"""
        convert = util.aslist_of(int)
        self.assertEqual(convert("1, 2 3"), [1, 2, 3])
        self.assertEqual(convert([4.0, "5"]), [4, 5])

    def test_optional(self):
        """None-like strings pass through optional converters"""
        convert = util.optional(int)
        self.assertIsNone(convert("null"))
        self.assertIsNone(convert(None))
        self.assertEqual(convert("7"), 7)


class TestHashing(unittest.TestCase):

    """Tests for the canonical JSON hash"""

    def test_key_order_irrelevant(self):
        """Hash does not depend on key order"""
        self.assertEqual(
            util.sha256_hex({"a": 1, "b": [1, 2]}), util.sha256_hex({"b": [1, 2], "a": 1})
        )

    def test_values_matter(self):
        """Different values hash differently"""
        self.assertNotEqual(util.sha256_hex({"a": 1}), util.sha256_hex({"a": 2}))


class TestFiles(unittest.TestCase):

    """Tests for file helpers"""

    def setUp(self):
        super(TestFiles, self).setUp()
        self.tempdir = tempfile.mkdtemp()

    def tearDown(self):
        super(TestFiles, self).tearDown()
        shutil.rmtree(self.tempdir)

    def test_atomic_write(self):
        """atomic_write creates parent dirs and leaves no temp file"""
        path = os.path.join(self.tempdir, "a", "b.bin")
        util.atomic_write(path, b"data")
        with open(path, "rb") as ifile:
            self.assertEqual(ifile.read(), b"data")
        self.assertEqual(os.listdir(os.path.dirname(path)), ["b.bin"])

    def test_cache_dir_from_env(self):
        """The dataset cache honors CROSSMODAL_SEG_CACHE"""
        cache = os.path.join(self.tempdir, "cache")
        with patch.dict(os.environ, {util.CACHE_ENV: cache}):
            self.assertEqual(util.get_cache_dir(), cache)
        self.assertTrue(os.path.isdir(cache))
