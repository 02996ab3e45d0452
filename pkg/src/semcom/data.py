"""Image folder ingestion and the bundled toy corpus."""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".webp")
TOY_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field",
               "immunohistochemistry", "retina", "colorwheel")


@dataclass
class ImageDataset:
    train: torch.Tensor
    val: torch.Tensor
    files: list = field(default_factory=list)
    skipped: int = 0

    def summary(self):
        return {
            "train": int(self.train.shape[0]),
            "val": int(self.val.shape[0]),
            "image_shape": list(self.train.shape[1:]),
            "files": len(self.files),
            "skipped": self.skipped,
        }


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, image):
    """Write an HWC or CHW float image in [0, 1] as 8-bit PNG."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def to_tensor(hwc):
    return torch.from_numpy(np.ascontiguousarray(hwc.transpose(2, 0, 1)))


def center_crop(arr, size):
    h, w = arr.shape[:2]
    if h < size or w < size:
        return None
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top : top + size, left : left + size]


def ingest_dataset(directory, crop_size=32, patches_per_image=1, val_fraction=0.1, seed=0, scale=1.0):
    """Load every decodable raster image in ``directory``.

    Files are visited in sorted order. With ``patches_per_image == 1`` each
    image contributes its center crop, otherwise that many seeded random
    patches. Undecodable files are skipped and counted. The train/validation
    split comes from a seeded shuffle of all crops.
    """
    if not os.path.isdir(directory):
        raise ConfigError(f"dataset directory {directory!r} does not exist")
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))
    rng = np.random.default_rng(seed)
    crops, files, skipped = [], [], 0
    for name in names:
        path = os.path.join(directory, name)
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if scale != 1.0:
                    im = im.resize((max(1, round(im.width * scale)), max(1, round(im.height * scale))),
                                   Image.BICUBIC)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            skipped += 1
            continue
        h, w = arr.shape[:2]
        if h < crop_size or w < crop_size:
            logger.warning("skipping %s: smaller than crop size %d", path, crop_size)
            skipped += 1
            continue
        files.append(name)
        if patches_per_image <= 1:
            crops.append(center_crop(arr, crop_size))
        else:
            for _ in range(patches_per_image):
                top = int(rng.integers(0, h - crop_size + 1))
                left = int(rng.integers(0, w - crop_size + 1))
                crops.append(arr[top : top + crop_size, left : left + crop_size])
    if not crops:
        raise ConfigError(f"no decodable images found in {directory!r} ({skipped} skipped)")
    stack = torch.stack([to_tensor(c) for c in crops])
    perm = torch.from_numpy(rng.permutation(len(crops)))
    n_val = int(round(len(crops) * val_fraction))
    if len(crops) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(crops) - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return ImageDataset(train=stack[train_idx], val=stack[val_idx], files=files, skipped=skipped)


def write_toy_corpus(directory):
    """Write the sample photographs bundled with scikit-image as PNGs."""
    import skimage.data

    os.makedirs(directory, exist_ok=True)
    written = []
    for name in TOY_SOURCES:
        img = getattr(skimage.data, name)()
        path = os.path.join(directory, f"{name}.png")
        Image.fromarray(img[..., :3]).save(path)
        written.append(path)
    return written
