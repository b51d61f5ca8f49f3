"""Named sub-seeds derived from one master seed."""

import zlib

import numpy as np
import torch


def derive_seed(master, name):
    """Stable 63-bit seed for stage ``name`` under ``master``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def numpy_rng(master, name):
    return np.random.default_rng(derive_seed(master, name))


def torch_generator(master, name=None):
    seed = int(master) if name is None else derive_seed(master, name)
    g = torch.Generator()
    g.manual_seed(seed)
    return g
