"""Run configuration: one JSON document with a section per module."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .eval import EpisodeLimits, Thresholds
from .netdeploy.pipeline import PipelineConfig
from .sac import RewardConfig, SacConfig
from .world import ActionLimits, SceneParams

SECTIONS = ("scene", "sac", "dataset", "rebalance", "eval", "net")


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


@dataclass(frozen=True)
class TrainSettings:
    sac: SacConfig = SacConfig()
    reward: RewardConfig = RewardConfig()
    eval_every: int = 10_000
    eval_episodes: int = 30
    target_success: float | None = 0.95
    easy_scenes: bool = True


@dataclass(frozen=True)
class DatasetSettings:
    policy: str = "expert"
    episodes: int = 10


@dataclass(frozen=True)
class RebalanceSettings:
    alpha: float | list = 0.0
    bootstrap: int = 200


@dataclass(frozen=True)
class EvalSettings:
    limits: EpisodeLimits = EpisodeLimits()
    thresholds: Thresholds = Thresholds()
    trials: int = 30


@dataclass(frozen=True)
class NetSettings:
    pipeline: PipelineConfig = PipelineConfig()
    downlink_timeout_ms: float = 500.0


@dataclass(frozen=True)
class RunConfig:
    scene: SceneParams = SceneParams()
    sac: TrainSettings = TrainSettings()
    dataset: DatasetSettings = DatasetSettings()
    rebalance: RebalanceSettings = RebalanceSettings()
    eval: EvalSettings = EvalSettings()
    net: NetSettings = NetSettings()

    def to_dict(self) -> dict:
        lim = asdict(self.eval.limits)
        return {
            "scene": self.scene.to_dict(),
            "sac": {**self.sac.sac.to_dict(), "reward": self.sac.reward.to_dict(),
                    "eval_every": self.sac.eval_every, "eval_episodes": self.sac.eval_episodes,
                    "target_success": self.sac.target_success, "easy_scenes": self.sac.easy_scenes},
            "dataset": asdict(self.dataset),
            "rebalance": asdict(self.rebalance),
            "eval": {**{k: v for k, v in lim.items() if k != "action_limits"},
                     "action_limits": lim["action_limits"],
                     "thresholds": asdict(self.eval.thresholds), "trials": self.eval.trials},
            "net": {**self.net.pipeline.to_dict(), "downlink_timeout_ms": self.net.downlink_timeout_ms},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        cfg = cls()
        try:
            if "scene" in d:
                cfg = replace(cfg, scene=SceneParams(**_strict(SceneParams, d["scene"], "scene")))
            if "sac" in d:
                s = dict(d["sac"])
                reward = s.pop("reward", {})
                extra = {k: s.pop(k) for k in ("eval_every", "eval_episodes", "target_success", "easy_scenes")
                         if k in s}
                cfg = replace(cfg, sac=TrainSettings(SacConfig(**_strict(SacConfig, s, "sac")),
                                                     RewardConfig(**_strict(RewardConfig, reward, "sac.reward")),
                                                     **{**asdict_shallow(TrainSettings()), **extra}))
            if "dataset" in d:
                cfg = replace(cfg, dataset=DatasetSettings(**_strict(DatasetSettings, d["dataset"], "dataset")))
            if "rebalance" in d:
                r = dict(d["rebalance"])
                cfg = replace(cfg, rebalance=RebalanceSettings(**_strict(RebalanceSettings, r, "rebalance")))
            if "eval" in d:
                e = dict(d["eval"])
                th = e.pop("thresholds", {})
                trials = e.pop("trials", EvalSettings.trials)
                al = e.pop("action_limits", None)
                lim = _strict(EpisodeLimits, e, "eval")
                if al is not None:
                    lim["action_limits"] = ActionLimits(**_strict(ActionLimits, al, "eval.action_limits"))
                cfg = replace(cfg, eval=EvalSettings(EpisodeLimits(**lim),
                                                     Thresholds(**_strict(Thresholds, th, "eval.thresholds")), trials))
            if "net" in d:
                n = dict(d["net"])
                timeout = n.pop("downlink_timeout_ms", NetSettings.downlink_timeout_ms)
                cfg = replace(cfg, net=NetSettings(PipelineConfig(**_strict(PipelineConfig, n, "net")), timeout))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def asdict_shallow(ts: TrainSettings) -> dict:
    return {f.name: getattr(ts, f.name) for f in fields(ts) if f.name not in ("sac", "reward")}
