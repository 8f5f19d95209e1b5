""" Tests for training, evaluation, prediction and the studies """
import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch
from mock import patch
from PIL import Image

from crossmodal_seg import training
from crossmodal_seg.checkpoint import load_checkpoint
from crossmodal_seg.config import load_config, toy_config
from crossmodal_seg.data import ReferringDataset, split_triplets
from crossmodal_seg.exceptions import (
    CheckpointError,
    ConfigurationError,
    InputError,
    TrainingDivergedError,
)
from crossmodal_seg.losses import LossTerms
from crossmodal_seg.metrics import sample_iou
from crossmodal_seg.modeling import build_model, parameter_count
from crossmodal_seg.storage import FileStorage
from crossmodal_seg.training import (
    ABLATIONS,
    Trainer,
    TrainState,
    build_optimizer,
    evaluate,
    evaluate_model,
    poly_lr,
    predict,
    prepare_preprocessing,
    train,
)

from . import SLOW, DummyStorage, make_inputs, make_triplets, tiny_config

BASELINE = os.path.join(os.path.dirname(__file__), "fixtures", "loss_baseline.json")


class TrainingTestCase(unittest.TestCase):

    """Base class with a dataset and a scratch output directory"""

    @classmethod
    def setUpClass(cls):
        super(TrainingTestCase, cls).setUpClass()
        cls.triplets = make_triplets(16)

    def setUp(self):
        super(TrainingTestCase, self).setUp()
        self.tempdir = tempfile.mkdtemp()
        self.cfg = tiny_config(
            **{"encoder.text_vocab_size": 0, "output_dir": self.tempdir, "encoder.max_tokens": 16}
        )

    def tearDown(self):
        super(TrainingTestCase, self).tearDown()
        shutil.rmtree(self.tempdir)

    def _trainer(self, cfg=None):
        cfg, vocab, norm = prepare_preprocessing(cfg or self.cfg, self.triplets)
        dataset = ReferringDataset(
            split_triplets(self.triplets, "train"),
            cfg.encoder.image_size,
            vocab,
            norm,
            cfg.encoder.max_tokens,
        )
        return Trainer(cfg, dataset)


class TestSchedule(unittest.TestCase):

    """Tests for the polynomial learning rate"""

    def test_values(self):
        """lr = base (1 - t/T)^0.9"""
        self.assertEqual(poly_lr(1.0, 0, 10), 1.0)
        self.assertAlmostEqual(poly_lr(2.0, 5, 10), 2.0 * 0.5 ** 0.9)
        self.assertEqual(poly_lr(1.0, 10, 10), 0.0)
        self.assertEqual(poly_lr(1.0, 12, 10), 0.0)

    def test_power(self):
        """The power is configurable"""
        self.assertAlmostEqual(poly_lr(1.0, 5, 10, power=1.0), 0.5)

    def test_no_steps(self):
        """A schedule needs at least one step"""
        with self.assertRaises(ConfigurationError):
            poly_lr(1.0, 0, 0)

    def test_train_state_no_best_yet(self):
        """A fresh state has no best score rather than an out-of-range sentinel"""
        state = TrainState()
        self.assertIsNone(state.best_val_miou)
        self.assertIsNone(TrainState.from_dict(json.loads(json.dumps(state.to_dict()))).best_val_miou)

    def test_train_state_round_trip(self):
        """TrainState serializes to a plain dict"""
        state = TrainState(step=3, epoch=1, current_lr=0.5, best_val_miou=0.25, total_steps=9)
        self.assertEqual(TrainState.from_dict(json.loads(json.dumps(state.to_dict()))), state)


class TestTrainer(TrainingTestCase):

    """Tests for the Trainer"""

    def test_preprocessing(self):
        """The vocabulary size is filled in from the training split"""
        cfg, vocab, norm = prepare_preprocessing(self.cfg, self.triplets)
        self.assertEqual(cfg.encoder.text_vocab_size, len(vocab))
        self.assertEqual(len(norm["mean"]), 3)

    def test_preprocessing_vocab_too_small(self):
        """An explicit vocabulary size must fit the vocabulary"""
        with self.assertRaises(ConfigurationError):
            prepare_preprocessing(self.cfg.replace(**{"encoder.text_vocab_size": 4}), self.triplets)

    def test_fixed_normalization(self):
        """Configured mean/std are used as is"""
        cfg = self.cfg.replace(**{"data.mean": [0.5] * 3, "data.std": [0.25] * 3})
        _, _, norm = prepare_preprocessing(cfg, self.triplets)
        self.assertEqual(norm, {"mean": [0.5] * 3, "std": [0.25] * 3})

    def test_lr_follows_schedule(self):
        """The optimizer lr after k steps is the closed-form poly value"""
        trainer = self._trainer()
        total = trainer.state.total_steps
        self.assertEqual(total, 3 * 2)
        base = self.cfg.optimizer.lr
        trainer.train_epoch(1)
        self.assertEqual(trainer.state.step, 3)
        self.assertAlmostEqual(trainer.current_lr, poly_lr(base, 3, total), places=12)
        self.assertAlmostEqual(trainer.state.current_lr, trainer.current_lr)

    def test_optimizer_groups(self):
        """Encoder parameters get the scaled learning rate"""
        cfg = self.cfg.replace(
            **{"encoder.text_vocab_size": 40, "optimizer.backbone_lr_scale": 0.1}
        )
        model = build_model(cfg)
        optimizer = build_optimizer(model, cfg)
        self.assertEqual(len(optimizer.param_groups), 2)
        self.assertAlmostEqual(optimizer.param_groups[0]["lr"], cfg.optimizer.lr * 0.1)
        self.assertEqual(optimizer.param_groups[1]["lr"], cfg.optimizer.lr)
        encoder_params = sum(p.numel() for p in model.encoders.parameters())
        self.assertEqual(sum(p.numel() for p in optimizer.param_groups[0]["params"]), encoder_params)

    def test_frozen_text_encoder(self):
        """A frozen text encoder is left out of the optimizer"""
        cfg = self.cfg.replace(**{"encoder.text_vocab_size": 40, "encoder.freeze_text": True})
        model = build_model(cfg)
        optimizer = build_optimizer(model, cfg)
        optimized = {id(p) for group in optimizer.param_groups for p in group["params"]}
        self.assertFalse(any(id(p) in optimized for p in model.encoders.text.parameters()))

    def test_diverged(self):
        """A non-finite loss raises with the step, lr and batch ids"""
        trainer = self._trainer()
        nan = torch.tensor(float("nan"), requires_grad=True)
        with patch.object(training, "combined_loss", return_value=LossTerms(nan, nan, nan)):
            with self.assertRaises(TrainingDivergedError) as cm:
                trainer.train_epoch(1)
        self.assertEqual(cm.exception.step, 0)
        self.assertEqual(len(cm.exception.batch_ids), self.cfg.batch_size)
        self.assertTrue(all(i.startswith("syn-0-") for i in cm.exception.batch_ids))


class TestModelBuild(unittest.TestCase):

    """Tests for model construction"""

    def test_toy_size(self):
        """The toy preset stays small"""
        model = build_model(toy_config(**{"encoder.text_vocab_size": 60}))
        self.assertLess(parameter_count(model), 5000000)

    def test_seeded_init(self):
        """Same seed, same weights; the global RNG is untouched"""
        cfg = tiny_config()
        torch.manual_seed(5)
        expected = torch.rand(1)
        torch.manual_seed(5)
        a = build_model(cfg)
        self.assertTrue(torch.equal(torch.rand(1), expected))
        b = build_model(cfg)
        c = build_model(cfg, seed=1)
        for key, value in a.state_dict().items():
            self.assertTrue(torch.equal(value, b.state_dict()[key]), key)
        self.assertFalse(
            all(torch.equal(v, c.state_dict()[k]) for k, v in a.state_dict().items())
        )


class TestAblationWiring(unittest.TestCase):

    """All study variants build and train"""

    def _one_step(self, cfg):
        model = build_model(cfg)
        optimizer = build_optimizer(model, cfg)
        image, token_ids, pad_mask = make_inputs(cfg)
        target = (torch.rand(2, 32, 32, generator=torch.Generator().manual_seed(0)) > 0.5).long()
        logits = model(image, token_ids, pad_mask)
        loss = training.combined_loss(logits, target, cfg.loss).total
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        self.assertTrue(torch.isfinite(loss))
        self.assertTrue(all(torch.isfinite(p).all() for p in model.parameters()))
        return model

    def test_ablations(self):
        """Full > each single module > baseline in parameters"""
        counts = {}
        for name, overrides in ABLATIONS:
            model = self._one_step(tiny_config(**overrides))
            counts[name] = parameter_count(model)
            children = dict(model.named_children())
            self.assertEqual("smgam" in children, name in ("smgam", "full"), name)
        self.assertGreater(counts["full"], counts["smgam"])
        self.assertGreater(counts["full"], counts["tcmd"])
        self.assertGreater(counts["smgam"], counts["baseline"])
        self.assertGreater(counts["tcmd"], counts["baseline"])

    def test_decoder_variants(self):
        """Every decoder variant trains one step"""
        for variant in ("tcmd", "standard", "oad"):
            model = self._one_step(tiny_config(decoder_variant=variant))
            self.assertTrue(any(n.startswith(variant + ".") for n, _ in model.named_parameters()))

    def test_encoder_names_shared(self):
        """Variants share encoder parameter names"""
        names = set()
        for _, overrides in ABLATIONS:
            model = build_model(tiny_config(**overrides))
            names.add(tuple(n for n, _ in model.named_parameters() if n.startswith("encoders.")))
        self.assertEqual(len(names), 1)


class TestTrain(TrainingTestCase):

    """Tests for the training loop"""

    def test_deterministic(self):
        """Two seeded runs produce identical loss curves and weights"""
        a = train(self.cfg.replace(run_name="a"), self.triplets, storage=DummyStorage())
        b = train(self.cfg.replace(run_name="b"), self.triplets, storage=DummyStorage())
        self.assertEqual(a.losses, b.losses)
        for key, value in a.model.state_dict().items():
            self.assertTrue(torch.equal(value, b.model.state_dict()[key]), key)

    def test_outputs(self):
        """Training writes history, config and both checkpoints"""
        result = train(self.cfg, self.triplets)
        run_dir = self.cfg.run_dir()
        with open(os.path.join(run_dir, "history.jsonl")) as ifile:
            records = [json.loads(line) for line in ifile]
        self.assertEqual([r["epoch"] for r in records], [1, 2])
        for record in records:
            self.assertIn("mIoU", record["val"]["display"])
            self.assertGreater(record["loss"], 0)
        self.assertTrue(os.path.exists(os.path.join(run_dir, "config.json")))
        self.assertIsInstance(result.storage, FileStorage)
        self.assertEqual(list(result.storage.list()), ["best", "last"])
        self.assertEqual(result.state.step, 6)
        self.assertEqual(result.state.best_val_miou, max(r["val"]["miou"] for r in records))
        self.assertTrue(0.0 <= result.state.best_val_miou <= 1.0)

    def test_resume(self):
        """Stopping and resuming from 'last' matches an uninterrupted run"""
        whole = train(self.cfg.replace(run_name="whole"), self.triplets, storage=DummyStorage())
        storage = DummyStorage()
        cfg = self.cfg.replace(run_name="split")
        first = train(cfg, self.triplets, storage=storage, stop_after=1)
        self.assertEqual(len(first.history), 1)
        resumed = train(cfg, self.triplets, storage=storage, resume="last")
        self.assertEqual(resumed.losses, whole.losses)
        self.assertEqual(resumed.state.step, whole.state.step)
        for key, value in whole.model.state_dict().items():
            self.assertTrue(torch.equal(value, resumed.model.state_dict()[key]), key)

    def test_needs_val_split(self):
        """Training without validation data is refused"""
        train_only = split_triplets(self.triplets, "train")
        with self.assertRaises(InputError):
            train(self.cfg, train_only, storage=DummyStorage())


class TestEvaluatePredict(TrainingTestCase):

    """Tests for evaluating and predicting from checkpoints"""

    def setUp(self):
        super(TestEvaluatePredict, self).setUp()
        self.storage = DummyStorage()
        self.result = train(self.cfg, self.triplets, storage=self.storage)

    def test_matches_in_memory(self):
        """A stored checkpoint scores exactly like the in-memory model"""
        report = evaluate(self.storage, "last", self.triplets, "val")
        val = split_triplets(self.triplets, "val")
        dataset = ReferringDataset(
            val,
            self.result.cfg.encoder.image_size,
            self.result.vocab,
            self.result.normalization,
            self.result.cfg.encoder.max_tokens,
        )
        expected = evaluate_model(
            self.result.model, dataset, self.result.cfg, [t.category for t in val]
        )
        self.assertEqual(report, expected)
        self.assertEqual(report, evaluate(self.storage, "last", self.triplets, "val"))
        self.assertEqual(report.count, 2)

    def test_config_check(self):
        """Evaluating with an incompatible config is refused"""
        evaluate(self.storage, "last", self.triplets, "val", cfg=self.result.cfg)
        with self.assertRaises(CheckpointError):
            evaluate(
                self.storage,
                "last",
                self.triplets,
                "val",
                cfg=self.result.cfg.replace(decoder_variant="standard"),
            )

    def test_missing_split(self):
        """The requested split must exist"""
        with self.assertRaises(InputError):
            evaluate(self.storage, "last", split_triplets(self.triplets, "train"), "test")

    def test_predict_original_size(self):
        """Masks come back at the input image size"""
        image = np.random.RandomState(0).randint(0, 255, (50, 70, 3)).astype(np.uint8)
        mask_path = os.path.join(self.tempdir, "mask.png")
        overlay_path = os.path.join(self.tempdir, "overlay.png")
        mask = predict(self.storage, "last", image, "the red circle", mask_path, overlay_path)
        self.assertEqual(mask.shape, (50, 70))
        self.assertEqual(mask.dtype, bool)
        with Image.open(mask_path) as img:
            self.assertEqual(img.size, (70, 50))
            self.assertTrue(np.array_equal(np.asarray(img) > 0, mask))
        with Image.open(overlay_path) as img:
            self.assertEqual((img.size, img.mode), ((70, 50), "RGB"))

    def test_predict_empty_expression(self):
        """An empty expression is an input error"""
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        with self.assertRaises(InputError):
            predict(self.storage, "last", image, "  ")

    def test_loaded_state(self):
        """The stored train state matches the run"""
        loaded = load_checkpoint(self.storage, "last")
        self.assertEqual(loaded.train_state["step"], self.result.state.step)


class TestStudies(TrainingTestCase):

    """Tests for the ablation and decoder comparison drivers"""

    def test_ablate(self):
        """One row per variant, rendered as one table"""
        cfg = self.cfg.replace(epochs=1)
        rows = training.ablate(cfg, self.triplets, split="val")
        self.assertEqual([r.name for r in rows], [name for name, _ in ABLATIONS])
        table = training.study_table(rows, "ablation")
        for name, _ in ABLATIONS:
            self.assertIn(name, table)
        self.assertGreater(rows[-1].parameters, rows[0].parameters)

    def test_compare_decoders(self):
        """The decoder comparison trains the three variants"""
        rows = training.compare_decoders(self.cfg.replace(epochs=1), self.triplets, split="val")
        self.assertEqual([r.name for r in rows], ["tcmd", "standard", "oad"])
        self.assertEqual({r.cfg.decoder_variant for r in rows}, {"tcmd", "standard", "oad"})


class TestLossBaseline(unittest.TestCase):

    """Early training loss of the seeded toy run against the recorded curve"""

    def setUp(self):
        super(TestLossBaseline, self).setUp()
        self.tempdir = tempfile.mkdtemp()
        with open(BASELINE) as ifile:
            self.baseline = json.load(ifile)

    def tearDown(self):
        super(TestLossBaseline, self).tearDown()
        shutil.rmtree(self.tempdir)

    def test_first_epochs(self):
        """Loss strictly decreases over the first epochs and matches the recording"""
        baseline = self.baseline
        triplets = make_triplets(baseline["triplets"], seed=baseline["seed"])
        cfg = load_config(
            None, {"seed": baseline["seed"], "output_dir": self.tempdir}, preset=baseline["preset"]
        )
        result = train(cfg, triplets, storage=DummyStorage(), stop_after=baseline["epochs"])
        losses = result.losses
        self.assertEqual(len(losses), baseline["epochs"])
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, before)
        if baseline["losses"] is None:
            # First run records the curve, like a cassette
            baseline["losses"] = losses
            with open(BASELINE, "w") as ofile:
                json.dump(baseline, ofile, indent=2)
                ofile.write("\n")
        else:
            np.testing.assert_allclose(losses, baseline["losses"], rtol=1e-4)


@unittest.skipUnless(SLOW, "set CMS_SLOW_TESTS=1 to run the overfit experiment")
class TestOverfit(unittest.TestCase):

    """Long end-to-end run on the synthetic set"""

    def test_overfit(self):
        """The toy model memorizes 16 triplets and follows the expression"""
        tempdir = tempfile.mkdtemp()
        try:
            triplets = make_triplets(16, seed=0)
            cfg = toy_config(epochs=200, output_dir=tempdir, run_name="overfit")
            storage = DummyStorage()
            result = train(cfg, triplets, storage=storage)
            self.assertLess(np.mean(result.losses[5:10]), np.mean(result.losses[:5]))
            report = evaluate(storage, "last", triplets, "train")
            self.assertGreaterEqual(report.miou, 0.9)

            train_split = split_triplets(triplets, "train")
            for a, b in (train_split[0:2], train_split[2:4]):
                self.assertIs(a.scene.scene, b.scene.scene)
                for src, other in ((a, b), (b, a)):
                    mask = predict(storage, "last", src.load_image(), other.expression)
                    self.assertGreaterEqual(sample_iou(mask, other.mask)[2], 0.5)
        finally:
            shutil.rmtree(tempdir)
