"""Test package. Shared fixtures for the tests that need a trained
pipeline or a gradient check."""

from argparse import Namespace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from xling_emotion_tts.cli import COMMANDS
from xling_emotion_tts.configs import GlobalConfig, load_global_config

RESOURCES_DIR = Path(__file__).parent / "resources"
TINY_PIPELINE_CONFIG = RESOURCES_DIR / "tiny_pipeline.json"
PIPELINE_STEPS = (
    "gen-corpus",
    "perturb",
    "fit-codebook",
    "train-encoders",
    "train-txt2vec",
    "train-vec2wav",
)


def tiny_config(workdir: Path) -> GlobalConfig:
    """The tiny pipeline configuration rooted at workdir"""
    return load_global_config(TINY_PIPELINE_CONFIG, workdir=workdir)


def run_steps(config: GlobalConfig, steps: Sequence[str]) -> None:
    """Runs pipeline subcommands in order, as the command line would"""
    config.paths.workdir.mkdir(parents=True, exist_ok=True)
    for step in steps:
        COMMANDS[step](config, Namespace(no_resume=False))


def finite_difference_error(
    loss_fn: Callable[[], torch.Tensor],
    module: torch.nn.Module,
    num_checks: int = 100,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Largest relative error between autograd and central differences
    over randomly sampled parameter entries"""
    named = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), named, allow_unused=True)
    sizes = np.array([p.numel() for p in named])
    rng = np.random.default_rng(seed)
    flat_choices = rng.choice(sizes.sum(), size=num_checks, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for choice in flat_choices:
        which = int(np.searchsorted(offsets, choice, side="right") - 1)
        index = int(choice - offsets[which])
        flat = named[which].data.view(-1)
        original = float(flat[index])
        with torch.no_grad():
            flat[index] = original + step
            plus = float(loss_fn())
            flat[index] = original - step
            minus = float(loss_fn())
            flat[index] = original
        numeric = (plus - minus) / (2 * step)
        grad = grads[which]
        analytic = 0.0 if grad is None else float(grad.view(-1)[index])
        denominator = max(1e-4, abs(numeric), abs(analytic))
        worst = max(worst, abs(numeric - analytic) / denominator)
    return worst
