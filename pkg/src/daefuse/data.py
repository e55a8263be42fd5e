"""Loading, pairing, cropping and batching of registered multi-modality images.

All pixel data is kept as float32 arrays in [0, 1]; RGB inputs are collapsed
to BT.601 luminance at load time and integer rasters are scaled by their type
maximum (255 or 65535). Dataset layout on disk is two sibling directories
``a/`` and ``b/`` with identically named files; video sequences are two
directories of frame files whose sorted names define temporal order.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import (
    CropError,
    EmptyDatasetError,
    InvalidImageError,
    NotFoundError,
    PairingError,
    RegistrationError,
    UnsupportedFormatError,
)

RASTER_EXTENSIONS = (".png", ".tif", ".tiff", ".bmp")

# ITU-R BT.601 luma weights for RGB -> intensity.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class Image:
    """Single-channel intensity grid in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidImageError(
                f"image '{self.source_id}' must be a non-empty 2-D array, got shape {px.shape}"
            )
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidImageError(
                f"image '{self.source_id}' has intensities outside [0, 1]"
            )
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ImagePair:
    """Registered (pixel-aligned) pair of modality images."""

    modality_a: Image
    modality_b: Image

    def __post_init__(self):
        a, b = self.modality_a, self.modality_b
        if (a.height, a.width) != (b.height, b.width):
            raise RegistrationError(
                f"pair ('{a.source_id}', '{b.source_id}') sizes differ: "
                f"{a.height}x{a.width} vs {b.height}x{b.width}"
            )

    @property
    def height(self):
        return self.modality_a.height

    @property
    def width(self):
        return self.modality_a.width


@dataclass(frozen=True)
class VideoSequence:
    """Temporally ordered registered frame pairs, all of identical size."""

    frames: tuple
    frame_index_base: int = 0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise EmptyDatasetError("video sequence has no frames")
        h, w = frames[0].height, frames[0].width
        for i, fr in enumerate(frames):
            if (fr.height, fr.width) != (h, w):
                raise RegistrationError(
                    f"frame {self.frame_index_base + i} is {fr.height}x{fr.width}, "
                    f"expected {h}x{w}"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class PatchBatch:
    """Aligned crops from both modalities, all crop_size x crop_size."""

    patches_a: tuple
    patches_b: tuple
    batch_size: int = field(default=-1)

    def __post_init__(self):
        pa, pb = tuple(self.patches_a), tuple(self.patches_b)
        n = len(pa) if self.batch_size < 0 else self.batch_size
        if len(pa) != n or len(pb) != n:
            raise InvalidImageError(
                f"batch sides have {len(pa)}/{len(pb)} patches, expected {n}"
            )
        shapes = {p.pixels.shape for p in pa} | {p.pixels.shape for p in pb}
        if len(shapes) > 1:
            raise RegistrationError(f"batch patches have mixed shapes: {sorted(shapes)}")
        object.__setattr__(self, "patches_a", pa)
        object.__setattr__(self, "patches_b", pb)
        object.__setattr__(self, "batch_size", n)


def load_image(path):
    """Load an 8/16-bit grayscale or RGB raster as an intensity Image.

    RGB is reduced to BT.601 luminance; integer intensities are divided by
    the type maximum so the result lies in [0, 1].
    """
    if not os.path.isfile(path):
        raise NotFoundError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            if mode in ("L", "I;16", "I"):
                arr = np.asarray(im)
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im)[..., :3]
            else:
                raise UnsupportedFormatError(f"{path}: unsupported image mode '{mode}'")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a decodable raster ({exc})") from exc

    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidImageError(f"zero-area image: {path}")

    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        # PIL mode "I" holds 16-bit rasters in int32; treat as 16-bit depth.
        scale = 65535.0
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample type {arr.dtype}")

    px = arr.astype(np.float64) / scale
    if px.ndim == 3:
        px = px @ _LUMA_WEIGHTS
    px = np.clip(px, 0.0, 1.0)
    return Image(pixels=px.astype(np.float32), source_id=os.path.basename(path))


def _list_rasters(directory):
    if not os.path.isdir(directory):
        raise NotFoundError(f"no such dataset directory: {directory}")
    names = [
        n
        for n in os.listdir(directory)
        if n.lower().endswith(RASTER_EXTENSIONS)
        and os.path.isfile(os.path.join(directory, n))
    ]
    return sorted(names)


def load_pair_dataset(root):
    """Load <root>/a and <root>/b into filename-matched, sorted ImagePairs."""
    dir_a = os.path.join(root, "a")
    dir_b = os.path.join(root, "b")
    names_a, names_b = _list_rasters(dir_a), _list_rasters(dir_b)
    only_a = sorted(set(names_a) - set(names_b))
    only_b = sorted(set(names_b) - set(names_a))
    if only_a or only_b:
        missing = only_a + only_b
        raise PairingError(f"unmatched filenames between a/ and b/: {missing}")
    if not names_a:
        raise EmptyDatasetError(f"no raster files under {root}/a and {root}/b")
    pairs = []
    for name in names_a:
        img_a = load_image(os.path.join(dir_a, name))
        img_b = load_image(os.path.join(dir_b, name))
        pairs.append(ImagePair(img_a, img_b))
    return pairs


def load_video_sequence(root_a, root_b):
    """Load two frame directories into a registered, temporally ordered sequence."""
    names_a, names_b = _list_rasters(root_a), _list_rasters(root_b)
    if not names_a and not names_b:
        raise EmptyDatasetError(f"no frames under {root_a} / {root_b}")
    if len(names_a) != len(names_b):
        raise PairingError(
            f"frame count mismatch: {len(names_a)} in {root_a} vs {len(names_b)} in {root_b}"
        )
    frames = []
    for i, (na, nb) in enumerate(zip(names_a, names_b)):
        img_a = load_image(os.path.join(root_a, na))
        img_b = load_image(os.path.join(root_b, nb))
        try:
            frames.append(ImagePair(img_a, img_b))
        except RegistrationError as exc:
            raise RegistrationError(f"frame {i}: {exc}") from exc
    seq = VideoSequence(frames=tuple(frames))
    if len(seq) > 1:
        h, w = frames[0].height, frames[0].width
        for i, fr in enumerate(frames):
            if (fr.height, fr.width) != (h, w):
                raise RegistrationError(f"frame {i} drifts to {fr.height}x{fr.width}")
    return seq


def reflect_pad(img, target_h, target_w):
    """Reflect-pad an Image up to at least target_h x target_w."""
    pad_h = max(0, target_h - img.height)
    pad_w = max(0, target_w - img.width)
    if pad_h == 0 and pad_w == 0:
        return img
    px = np.pad(
        img.pixels,
        ((0, pad_h), (0, pad_w)),
        mode="reflect" if min(img.height, img.width) > 1 else "edge",
    )
    return Image(pixels=px, source_id=img.source_id)


def random_crop_pair(pair, crop_size, rng):
    """Crop both modalities at one uniformly random, shared offset."""
    h, w = pair.height, pair.width
    if h < crop_size or w < crop_size:
        raise CropError(
            f"pair '{pair.modality_a.source_id}' is {h}x{w}, smaller than crop {crop_size}"
        )
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    crop_a = pair.modality_a.pixels[top : top + crop_size, left : left + crop_size]
    crop_b = pair.modality_b.pixels[top : top + crop_size, left : left + crop_size]
    return (
        Image(pixels=crop_a, source_id=pair.modality_a.source_id),
        Image(pixels=crop_b, source_id=pair.modality_b.source_id),
    )


def make_batches(pairs, config, rng):
    """Yield one epoch of shuffled PatchBatches; the last batch may be short.

    Pairs smaller than the crop size are reflect-padded first, so every
    sample is visited exactly once per epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("cannot batch an empty pair list")
    crop = config.crop_size
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        patches_a, patches_b = [], []
        for i in idx:
            pair = pairs[int(i)]
            if pair.height < crop or pair.width < crop:
                pair = ImagePair(
                    reflect_pad(pair.modality_a, crop, crop),
                    reflect_pad(pair.modality_b, crop, crop),
                )
            pa, pb = random_crop_pair(pair, crop, rng)
            patches_a.append(pa)
            patches_b.append(pb)
        yield PatchBatch(tuple(patches_a), tuple(patches_b), len(patches_a))


def save_image(img, path):
    """Write an Image to disk as an 8-bit grayscale PNG/TIFF/BMP."""
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)
