""" Tests for crossmodal_seg """
import os
from contextlib import closing
from io import BytesIO

import torch

from crossmodal_seg.config import toy_config
from crossmodal_seg.data import generate_synthetic
from crossmodal_seg.exceptions import CheckpointError
from crossmodal_seg.storage import ICheckpointStorage

os.environ["AWS_SECRET_ACCESS_KEY"] = "access_key"
os.environ["AWS_ACCESS_KEY_ID"] = "secret_key"

SLOW = os.environ.get("CMS_SLOW_TESTS") == "1"


def tiny_config(**overrides):
    """Toy preset shrunk further so a forward pass takes milliseconds"""
    settings = {
        "encoder.image_size": 32,
        "encoder.stage_channels": [8, 16, 32, 64],
        "encoder.text_dim": 16,
        "encoder.num_heads": 4,
        "encoder.max_tokens": 8,
        "encoder.text_vocab_size": 20,
        "epochs": 2,
        "batch_size": 4,
    }
    settings.update(overrides)
    return toy_config(**settings)


def make_inputs(cfg, batch=2, lengths=None, seed=0, dtype=torch.float32):
    """Random image batch, token ids and pad mask matching a config"""
    gen = torch.Generator().manual_seed(seed)
    size = cfg.encoder.image_size
    image = torch.randn(batch, 3, size, size, generator=gen).to(dtype)
    n = cfg.encoder.max_tokens
    token_ids = torch.randint(3, cfg.encoder.text_vocab_size, (batch, n), generator=gen)
    token_ids[:, 0] = 2
    lengths = lengths or [n - i for i in range(batch)]
    pad_mask = torch.zeros(batch, n, dtype=torch.bool)
    for i, length in enumerate(lengths):
        pad_mask[i, :length] = True
        token_ids[i, length:] = 0
    return image, token_ids, pad_mask


def make_triplets(count=16, seed=0):
    return generate_synthetic(seed, count)


def directional_gradient_check(
    test, loss_fn, named_params, eps=1e-6, rtol=1e-4, atol=1e-8, attempts=3
):
    """
    Compare analytic gradients to central finite differences

    For every parameter a random direction d is drawn and the directional
    derivative <grad, d> is compared to (f(p + eps d) - f(p - eps d)) / 2 eps.
    Run in float64.

    The quotient is only trusted when it agrees with the one taken at eps / 10;
    a direction whose step interval straddles a ReLU kink is redrawn, at most
    ``attempts`` times.

    """
    named_params = list(named_params)
    loss = loss_fn()
    grads = torch.autograd.grad(
        loss, [p for _, p in named_params], allow_unused=True
    )
    gen = torch.Generator().manual_seed(1234)

    def quotient(param, direction, step):
        with torch.no_grad():
            param.add_(step * direction)
            plus = float(loss_fn())
            param.sub_(2 * step * direction)
            minus = float(loss_fn())
            param.add_(step * direction)
        return (plus - minus) / (2 * step)

    def close(a, b):
        return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol

    for (name, param), grad in zip(named_params, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        for _ in range(attempts):
            direction = torch.randn(param.shape, generator=gen, dtype=param.dtype)
            numeric = quotient(param, direction, eps)
            if close(numeric, quotient(param, direction, eps / 10)):
                break
        else:
            test.fail("%s: no direction with a stable finite difference" % name)
        analytic = float((grad * direction).sum())
        test.assertTrue(
            close(analytic, numeric),
            "%s: analytic %.10g vs numeric %.10g" % (name, analytic, numeric),
        )


class DummyStorage(ICheckpointStorage):

    """In-memory implementation of ICheckpointStorage"""

    def __init__(self):
        super(DummyStorage, self).__init__()
        self.checkpoints = {}

    def list(self):
        return sorted(
            name for name, files in self.checkpoints.items() if "manifest.json" in files
        )

    def save(self, name, files):
        self.checkpoints.setdefault(name, {}).update(files)

    def open(self, name, filename):
        try:
            return closing(BytesIO(self.checkpoints[name][filename]))
        except KeyError:
            raise CheckpointError("No %s in %s" % (filename, name))

    def exists(self, name, filename="manifest.json"):
        return filename in self.checkpoints.get(name, {})

    def delete(self, name):
        self.checkpoints.pop(name, None)
