"""Experiment configuration: flat key=value files with section prefixes.

Every output artifact embeds the config digest so pipeline stages can be
checked for staleness. Unknown keys are rejected to catch typos.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .cloud import ServerConfig
from .nn import LayerSpec, TrainConfig
from .transfer import TransferPlan

DEFAULTS = {
    # track geometry
    "tracks.n_turns": 4,
    "tracks.n_obstacles": 3,
    # local demonstration collection: robot i uses seeds
    # [seed_base + 2i, seed_base + 2i + 1]
    "data.tracks_per_robot": 2,
    "data.steps_per_track": 600,
    "data.seed_base": 100,
    # cloud scene bank
    "bank.seeds": 8,
    "bank.seed_base": 500,
    "bank.scenes_per_seed": 125,
    "bank.stride": 4,
    # policy network
    "net.spec": "dense:256:64:relu,dense:64:32:relu,dense:32:1:tanh",
    # local behavioral cloning
    "train.learning_rate": 0.002,
    "train.weight_decay": 0.0,
    "train.epochs": 50,
    "train.batch_size": 32,
    "train.seed": 0,
    # cloud guide training
    "guide.learning_rate": 0.002,
    "guide.weight_decay": 0.001,
    "guide.epochs": 40,
    "guide.batch_size": 32,
    "guide.seed": 0,
    # layer transfer
    "transfer.split_index": 1,
    "transfer.head_init": "keep_guide",
    "transfer.lr_scale": 1.0,
    "transfer.epochs": 20,
    "compare.seeds": 5,
    # protocol server
    "server.robots": 3,
    "server.fusion_every": 2,
    "server.mode": "synchronous",
    "server.listen": "127.0.0.1:8731",
    "server.async_interval": 10.0,
    # closed-loop evaluation
    "eval.seed_base": 900,
    "eval.tracks": 3,
    "eval.max_steps": 400,
    "weather.intensity": 0.5,
    "weather.seed": 7,
}


class ConfigError(ValueError):
    pass


def parse_net_spec(text: str) -> tuple[LayerSpec, ...]:
    """``dense:256:64:relu,...`` into layer specs."""
    layers = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 4:
            raise ConfigError(f"bad layer spec {part!r}; "
                              "expected kind:in:out:activation")
        kind, in_dim, out_dim, act = fields
        layers.append(LayerSpec(kind=kind, in_dim=int(in_dim),
                                out_dim=int(out_dim), activation=act))
    return tuple(layers)


@dataclass
class ExperimentConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if path is not None:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, _, raw = line.partition("=")
                    key = key.strip()
                    if key not in DEFAULTS:
                        raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                    values[key] = _coerce(key, raw.strip())
        for key, val in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, str(val))
        return cls(values=values)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def digest(self) -> str:
        canonical = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def net_spec(self) -> tuple[LayerSpec, ...]:
        return parse_net_spec(self["net.spec"])

    def train_config(self, seed=None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            weight_decay=self["train.weight_decay"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"] if seed is None else seed)

    def guide_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["guide.learning_rate"],
            weight_decay=self["guide.weight_decay"],
            epochs=self["guide.epochs"],
            batch_size=self["guide.batch_size"],
            seed=self["guide.seed"])

    def transfer_config(self, seed=None) -> TrainConfig:
        cfg = self.train_config(seed=seed)
        cfg.epochs = self["transfer.epochs"]
        return cfg

    def transfer_plan(self) -> TransferPlan:
        return TransferPlan(split_index=self["transfer.split_index"],
                            head_init=self["transfer.head_init"],
                            lr_scale=self["transfer.lr_scale"])

    def server_config(self) -> ServerConfig:
        return ServerConfig(robots=self["server.robots"],
                            fusion_every=self["server.fusion_every"],
                            mode=self["server.mode"],
                            listen=self["server.listen"],
                            async_interval=self["server.async_interval"])

    def robot_seeds(self, robot_index: int) -> list:
        base = self["data.seed_base"] + self["data.tracks_per_robot"] * robot_index
        return [base + j for j in range(self["data.tracks_per_robot"])]

    def bank_seeds(self) -> list:
        return [self["bank.seed_base"] + j for j in range(self["bank.seeds"])]

    def eval_seeds(self) -> list:
        return [self["eval.seed_base"] + j for j in range(self["eval.tracks"])]

    def track_kwargs(self) -> dict:
        return {"n_turns": self["tracks.n_turns"],
                "n_obstacles": self["tracks.n_obstacles"]}

    def shifted(self, offset: int) -> "ExperimentConfig":
        """Copy with all data/bank/eval/train seeds moved by a block offset;
        used to run independent experiment repetitions."""
        values = dict(self.values)
        values["data.seed_base"] += 1000 * offset
        values["bank.seed_base"] += 1000 * offset
        values["eval.seed_base"] += 1000 * offset
        values["train.seed"] += offset
        values["guide.seed"] += offset
        return ExperimentConfig(values=values)


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
