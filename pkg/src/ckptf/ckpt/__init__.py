"""Checkpoint agent, drain and image format."""

from .agent import Barrier, CheckpointAgent, RunStats, Sleep, run_lockstep, run_threaded
from .drain import DrainPolicy, DrainResult, Drainer, drain
from .image import (
    ENV_DIR, MAGIC, LazyRegions, RankState, image_path, open_lazy, parse, read_image,
    serialize, write_image,
)

__all__ = [
    "Barrier", "CheckpointAgent", "DrainPolicy", "DrainResult", "Drainer", "ENV_DIR",
    "LazyRegions", "MAGIC", "RankState", "RunStats", "Sleep", "drain", "image_path",
    "open_lazy", "parse", "read_image", "run_lockstep", "run_threaded", "serialize",
    "write_image",
]
