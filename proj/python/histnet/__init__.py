"""Historical photo colorization: Lab conversion, metrics, training and inference."""

from pathlib import Path

from ._histnet import (
    Generator,
    ImageIoError,
    NonFiniteLossError,
    TrainConfig,
    build_dataset,
    dataset_stats,
    evaluate,
    hue_histogram,
    lab_to_rgb,
    perceptual_distance,
    psnr,
    read_rgb,
    rgb_to_lab,
    ssim,
    train,
    train_config_keys,
    write_rgb_png,
)


def _asset(name: str) -> Path:
    return Path(__file__).parent / "assets" / name


DEFAULT_PALETTE = _asset("parsing_palette.txt")
DEFAULT_TAXONOMY = _asset("taxonomy.txt")

__all__ = [
    "DEFAULT_PALETTE",
    "DEFAULT_TAXONOMY",
    "Generator",
    "ImageIoError",
    "NonFiniteLossError",
    "TrainConfig",
    "build_dataset",
    "dataset_stats",
    "evaluate",
    "hue_histogram",
    "lab_to_rgb",
    "perceptual_distance",
    "psnr",
    "read_rgb",
    "rgb_to_lab",
    "ssim",
    "train",
    "train_config_keys",
    "write_rgb_png",
]
