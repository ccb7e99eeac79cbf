"""JSON schemas for every document the CLI emits."""

import json
from functools import lru_cache
from importlib import resources

NAMES = ("scene", "gen_scenes_report", "train_report", "dataset_stats", "rebalance_report", "eval_report",
         "fly_report", "bench_report", "config")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"no schema named {name!r}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.json").read_text())
