"""Behavioral cloning for local agents.

A robot collects expert demonstrations in its own sensor modality and fits a
steering policy by mini-batch SGD on mean-squared error, optionally with L2
weight decay. Demonstration sets are private: they are written only to local
``FILD`` files and have no protocol encoding.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import world as sim
from .nn import (
    FormatError,
    PolicyModel,
    TrainConfig,
    backward_batch,
    forward_batch,
    init_model,
    mse_loss,
)
from .obs import GRID_CELLS, GRID_SIZE, ModalityId, Observation, STEERING_LIMIT

DATASET_MAGIC = b"FILD"
DATASET_FORMAT_VERSION = 1

# Offline mistake threshold: |prediction - label| above this counts as a
# per-frame mistake. Separates straight-driving from turn commands here.
MISTAKE_THRESHOLD = 0.1


@dataclass
class DemonstrationSet:
    """Expert-labeled observations of one modality; never leaves its agent.

    Stored as flat arrays for training speed; ``record(i)`` reconstructs the
    i-th Demonstration view.
    """

    modality: ModalityId
    observations: np.ndarray  # (N, 256) float32
    labels: np.ndarray       # (N,) float32
    provenance: tuple = field(default_factory=tuple)  # (track seed, ...) info

    def __post_init__(self):
        if self.observations.ndim != 2 or self.observations.shape[1] != GRID_CELLS:
            raise ValueError(f"observations must be (N, {GRID_CELLS}), "
                             f"got {self.observations.shape}")
        if self.labels.shape != (self.observations.shape[0],):
            raise ValueError("labels length must match observations")

    @property
    def N(self) -> int:
        return self.observations.shape[0]

    def __len__(self) -> int:
        return self.N

    def record(self, i: int) -> sim.Demonstration:
        grid = self.observations[i].reshape(GRID_SIZE, GRID_SIZE).copy()
        return sim.Demonstration(obs=Observation(self.modality, grid),
                                 steering=float(self.labels[i]))

    def duplicate(self) -> "DemonstrationSet":
        """Each record repeated twice, adjacently."""
        return DemonstrationSet(
            modality=self.modality,
            observations=np.repeat(self.observations, 2, axis=0),
            labels=np.repeat(self.labels, 2),
            provenance=self.provenance,
        )


def collect_demonstrations(seeds, modality: ModalityId, steps_per_track: int,
                           n_turns: int = 4, n_obstacles: int = 3,
                           ) -> DemonstrationSet:
    """Roll out the expert on each seeded track, recording (render, steering).

    Deterministic: same seeds produce bit-identical datasets. Expert
    off-track errors propagate with the offending seed named.
    """
    if not seeds:
        raise ValueError("need at least one track seed")
    if steps_per_track < 1:
        raise ValueError("steps_per_track must be >= 1")
    obs_rows, labels = [], []
    for seed in seeds:
        w = sim.generate_track(seed, n_turns=n_turns, n_obstacles=n_obstacles)
        for _ in range(steps_per_track):
            obs = sim.render(w, modality)
            try:
                steering = sim.expert_policy(w)
            except sim.OffTrackError as exc:
                raise sim.OffTrackError(f"expert left track seed {seed}: {exc}")
            obs_rows.append(obs.flat())
            labels.append(steering)
            w = sim.step(w, steering)
    return DemonstrationSet(
        modality=modality,
        observations=np.stack(obs_rows).astype(np.float32),
        labels=np.asarray(labels, dtype=np.float32),
        provenance=tuple(seeds),
    )


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float


def _split(data: DemonstrationSet):
    """Deterministic 90/10 split by stride: every 10th record validates."""
    idx = np.arange(data.N)
    val = idx[9::10]
    train = np.setdiff1d(idx, val)
    x = data.observations.astype(np.float64)
    y = data.labels.astype(np.float64)
    return x[train], y[train], x[val], y[val]


def fit_model(model: PolicyModel, data: DemonstrationSet, cfg: TrainConfig,
              lr_scale: float = 1.0) -> tuple[PolicyModel, list[EpochStats],
                                              str]:
    """Mini-batch SGD honoring the model's frozen mask.

    Returns the trained model (version bumped by one), the learning curve
    with epoch 0 holding the pre-training evaluation, and a digest of the
    batch-index sequence for controlled-experiment pairing.

    When one batch covers the whole training split, shuffling is skipped so
    full-batch runs are order-stable.
    """
    if data.N < cfg.batch_size:
        raise ValueError(f"dataset has {data.N} records, "
                         f"batch_size is {cfg.batch_size}")
    x_tr, y_tr, x_val, y_val = _split(data)
    n = x_tr.shape[0]
    rng = np.random.default_rng(cfg.seed)
    hasher = hashlib.sha256()

    curve = [EpochStats(0, mse_loss(model, x_tr, y_tr),
                        mse_loss(model, x_val, y_val))]
    full_batch = cfg.batch_size >= n
    from .nn import sgd_step  # local import keeps module init light

    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(n) if full_batch else rng.permutation(n)
        hasher.update(order.astype("<i8").tobytes())
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            grads, _ = backward_batch(model, x_tr[sel], y_tr[sel])
            model = sgd_step(model, grads, cfg, lr_scale=lr_scale)
        curve.append(EpochStats(epoch, mse_loss(model, x_tr, y_tr),
                                mse_loss(model, x_val, y_val)))
    model.version += 1
    return model, curve, hasher.hexdigest()


def train_bc(data: DemonstrationSet, spec, cfg: TrainConfig,
             ) -> tuple[PolicyModel, list[EpochStats]]:
    """Behavioral cloning from scratch; the result is tagged with the
    dataset's modality."""
    if data.N == 0:
        raise ValueError("empty demonstration set")
    model = init_model(spec, cfg.seed)
    model, curve, _ = fit_model(model, data, cfg)
    model.modality = data.modality
    return model, curve


@dataclass
class OfflineEval:
    mse: float
    mistake_rate: float
    n: int


def evaluate_offline(model: PolicyModel, data: DemonstrationSet) -> OfflineEval:
    """Per-frame MSE and the fraction of predictions off by more than the
    mistake threshold."""
    if model.modality is not None and model.modality != data.modality:
        raise ValueError(f"model is {model.modality.name.lower()}, dataset is "
                         f"{data.modality.name.lower()}")
    preds = forward_batch(model, data.observations.astype(np.float64))
    err = np.abs(preds - data.labels.astype(np.float64))
    return OfflineEval(mse=float(np.mean(err ** 2)),
                       mistake_rate=float(np.mean(err > MISTAKE_THRESHOLD)),
                       n=data.N)


def save_demonstrations(path, data: DemonstrationSet) -> None:
    """Write the binary dataset format (magic ``FILD``), little-endian."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HBI", DATASET_FORMAT_VERSION,
                             int(data.modality), data.N))
        interleaved = np.empty((data.N, GRID_CELLS + 1), dtype="<f4")
        interleaved[:, :GRID_CELLS] = data.observations
        interleaved[:, GRID_CELLS] = data.labels
        fh.write(interleaved.tobytes())


def load_demonstrations(path) -> DemonstrationSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 11:
        raise FormatError("dataset file too short", len(blob))
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r}", 0)
    version, modality_tag, count = struct.unpack("<HBI", blob[4:11])
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    try:
        modality = ModalityId(modality_tag)
    except ValueError:
        raise FormatError(f"unknown modality tag {modality_tag}", 6) from None
    expected = 11 + count * (GRID_CELLS + 1) * 4
    if len(blob) != expected:
        raise FormatError(f"dataset length {len(blob)} != expected {expected}",
                          min(len(blob), expected))
    flat = np.frombuffer(blob[11:], dtype="<f4").reshape(count, GRID_CELLS + 1)
    return DemonstrationSet(modality=modality,
                            observations=flat[:, :GRID_CELLS].copy(),
                            labels=flat[:, GRID_CELLS].copy())
