"""Shared fixtures: synthetic blob/edge pairs and on-disk dataset builders."""

import os

import numpy as np
import pytest
from PIL import Image as PILImage

from daefuse.data import Image, ImagePair, VideoSequence
from daefuse.fusion import AttentionConfig
from daefuse.networks import NetworkConfig
from daefuse.training import TrainingConfig


def smooth_blobs(size, rng, n_blobs=4):
    """Sum of random Gaussians normalized to [0, 1]."""
    xx, yy = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size))
    img = np.zeros((size, size))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.3)
        amp = rng.uniform(0.3, 1.0)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    lo, hi = img.min(), img.max()
    return ((img - lo) / (hi - lo + 1e-9)).astype(np.float32)


def edge_map(arr, rng, noise=0.05):
    """First-difference edge magnitude of arr plus Gaussian noise, in [0, 1]."""
    gx = np.abs(np.diff(arr, axis=0, prepend=arr[:1]))
    gy = np.abs(np.diff(arr, axis=1, prepend=arr[:, :1]))
    out = (gx + gy) * 3.0 + rng.normal(0.0, noise, arr.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_blob_pairs(n, size, seed):
    """Procedural dataset: modality A smooth blobs, B = A's edges plus noise."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        a = smooth_blobs(size, rng)
        b = edge_map(a, rng)
        pairs.append(ImagePair(Image(a, f"pair{i:03d}_a"), Image(b, f"pair{i:03d}_b")))
    return pairs


def make_translating_sequence(n_frames, size, seed, shift=1):
    """Blob scene translating `shift` px per frame, paired with its edges."""
    rng = np.random.default_rng(seed)
    big = smooth_blobs(size + n_frames * shift, rng)
    noise_rng = np.random.default_rng(seed + 1)
    frames = []
    for t in range(n_frames):
        off = t * shift
        a = big[off : off + size, off : off + size]
        b = edge_map(a, noise_rng)
        frames.append(ImagePair(Image(a, f"f{t:03d}"), Image(b, f"f{t:03d}")))
    return VideoSequence(frames=tuple(frames))


def write_gray_png(path, arr_uint8):
    PILImage.fromarray(arr_uint8.astype(np.uint8), mode="L").save(path)


def build_disk_dataset(root, n, size, seed):
    """Write a paired PNG dataset under <root>/a and <root>/b."""
    os.makedirs(os.path.join(root, "a"), exist_ok=True)
    os.makedirs(os.path.join(root, "b"), exist_ok=True)
    pairs = make_blob_pairs(n, size, seed)
    for i, pair in enumerate(pairs):
        name = f"{i:03d}.png"
        write_gray_png(
            os.path.join(root, "a", name), np.rint(pair.modality_a.pixels * 255)
        )
        write_gray_png(
            os.path.join(root, "b", name), np.rint(pair.modality_b.pixels * 255)
        )
    return root


def tiny_config(**overrides):
    """Small, fast config for unit tests; overrides win."""
    base = dict(
        phase1_epochs=1,
        phase2_epochs=1,
        lr0=1e-4,
        crop_size=16,
        batch_size=4,
        seed=7,
        checkpoint_every=100,
        network=NetworkConfig(
            base_channels=8,
            se_blocks=1,
            dhe_blocks=1,
            dle_blocks=1,
            dle_heads=2,
            dle_token_patch=8,
            disc_layers=2,
            weight_init_seed=7,
        ),
        attention=AttentionConfig(d_k=8, heads=1, token_patch=8),
    )
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture
def tiny_pairs():
    return make_blob_pairs(4, 16, seed=11)


@pytest.fixture
def tiny_run(tmp_path_factory):
    """One completed tiny two-phase run shared across a module."""
    from daefuse.training import train

    out = tmp_path_factory.mktemp("tiny_run")
    pairs = make_blob_pairs(4, 16, seed=11)
    config = tiny_config()
    ckpt, log = train(pairs, config, str(out))
    return {"out": str(out), "ckpt": ckpt, "log": log, "config": config, "pairs": pairs}
