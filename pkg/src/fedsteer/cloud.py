"""Cloud server state machine, independent of the transport.

Handles robot registration, parameters-only uploads, fusion scheduling and
guide delivery. In synchronous mode a fusion round fires once every robot
has uploaded for a round divisible by the fusion frequency; in asynchronous
mode a timer fuses whenever new uploads arrived since the last round.

Uploads are idempotent: re-sending the same (robot, round, bytes) changes
nothing. Fusion and guide training run on snapshots so uploads are never
blocked behind training.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

from . import protocol as proto
from .fusion import ModelRegistry, SceneBank, fuse_round, train_guide
from .nn import FormatError, PolicyModel, TrainConfig, deserialize_params, serialize_params
from .obs import ModalityId


@dataclass
class ServerConfig:
    """Orchestration knobs; ``listen`` is host:port for the HTTP service."""

    robots: int = 3
    fusion_every: int = 2
    mode: str = "synchronous"
    listen: str = "127.0.0.1:8731"
    async_interval: float = 10.0

    def __post_init__(self):
        if self.robots < 1:
            raise ValueError("robots must be >= 1")
        if self.fusion_every < 1:
            raise ValueError("fusion frequency must be >= 1")
        if self.mode not in ("synchronous", "asynchronous"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class _RobotRecord:
    modality: ModalityId
    last_round: int = 0
    last_digest: str = ""


class CloudState:
    """Registry, scene bank, current labels and the guide cache.

    All mutations go through one lock; fusion and guide training take
    snapshots and run outside it, serialized by a second lock so at most one
    fusion executes at a time.
    """

    def __init__(self, bank: SceneBank, net_spec, guide_cfg: TrainConfig,
                 server_cfg: ServerConfig, aggregator: str = "median"):
        self.bank = bank
        self.net_spec = tuple(net_spec)
        self.guide_cfg = guide_cfg
        self.cfg = server_cfg
        self.aggregator = aggregator

        self._lock = threading.Lock()
        self._fusion_lock = threading.Lock()
        self.registry = ModelRegistry()
        self.robots: dict[str, _RobotRecord] = {}
        self.labels = None
        self.labels_round = 0
        self.fusion_count = 0
        self.uploads_since_fusion = 0
        self._fused_through = 0
        self._guide_cache: dict[ModalityId, tuple[int, PolicyModel]] = {}

    # -- message handling ---------------------------------------------------

    def handle_message(self, msg):
        if isinstance(msg, proto.Hello):
            return self.hello(msg.robot_id, msg.modality)
        if isinstance(msg, proto.UploadParams):
            return self.upload(msg.robot_id, msg.round, msg.params)
        if isinstance(msg, proto.RequestGuide):
            return self.request_guide(msg.robot_id, msg.modality)
        return proto.Error(proto.ERR_UNSUPPORTED_TYPE,
                           f"cannot serve {type(msg).__name__}")

    def handle_frame(self, raw: bytes) -> bytes:
        """Decode a frame, dispatch it, encode the reply. Malformed frames
        get an in-band Error reply instead of tearing anything down."""
        try:
            msg = proto.decode(raw)
        except proto.UnknownTypeError as exc:
            return proto.encode(proto.Error(proto.ERR_UNSUPPORTED_TYPE, str(exc)))
        except proto.ProtocolError as exc:
            return proto.encode(proto.Error(proto.ERR_BAD_FRAME, str(exc)))
        return proto.encode(self.handle_message(msg))

    # -- operations ----------------------------------------------------------

    def hello(self, robot_id: str, modality: ModalityId):
        with self._lock:
            if robot_id in self.robots:
                return proto.Error(proto.ERR_DUPLICATE_ROBOT,
                                   f"robot {robot_id!r} already registered")
            self.robots[robot_id] = _RobotRecord(modality=modality)
            return proto.Ack(round=0)

    def upload(self, robot_id: str, round: int, params: bytes):
        try:
            model = deserialize_params(params)
        except FormatError as exc:
            return proto.Error(proto.ERR_BAD_PARAMS, str(exc))
        digest = hashlib.sha256(params).hexdigest()
        with self._lock:
            rec = self.robots.get(robot_id)
            if rec is None:
                return proto.Error(proto.ERR_UNKNOWN_ROBOT,
                                   f"robot {robot_id!r} never said hello")
            if round < rec.last_round:
                return proto.Error(
                    proto.ERR_STALE_UPLOAD,
                    f"round {round} below last seen {rec.last_round}")
            if round == rec.last_round and digest == rec.last_digest:
                return proto.Ack(round=round)  # idempotent redelivery
            if model.modality is None:
                model.modality = rec.modality
            try:
                self.registry.register(robot_id, model, round=round)
            except Exception as exc:
                return proto.Error(proto.ERR_BAD_PARAMS, str(exc))
            rec.last_round = round
            rec.last_digest = digest
            self.uploads_since_fusion += 1
            due = self._sync_fusion_due_locked()
        if due is not None:
            self._fuse(due)
        return proto.Ack(round=round)

    def request_guide(self, robot_id: str, modality: ModalityId):
        with self._lock:
            if robot_id not in self.robots:
                return proto.Error(proto.ERR_UNKNOWN_ROBOT,
                                   f"robot {robot_id!r} never said hello")
            if self.labels is None:
                return proto.Error(proto.ERR_NO_GUIDE,
                                   "no fusion round has produced labels yet")
        model = self._guide_for(modality)
        return proto.Guide(params=serialize_params(model),
                           fusion_round=self.labels_round)

    # -- fusion scheduling ----------------------------------------------------

    def _sync_fusion_due_locked(self):
        """Largest unfused round t with t % f == 0 completed by all robots."""
        if self.cfg.mode != "synchronous":
            return None
        if len(self.robots) < self.cfg.robots or not self.robots:
            return None
        f = self.cfg.fusion_every
        reach = min(rec.last_round for rec in self.robots.values())
        due = (reach // f) * f
        return due if due > self._fused_through else None

    def maybe_fuse_async(self) -> bool:
        """Async-mode trigger: fuse when anything new arrived. Returns
        whether a fusion ran."""
        with self._lock:
            if self.uploads_since_fusion == 0 or len(self.registry) == 0:
                return False
            t = max(rec.last_round for rec in self.robots.values())
        self._fuse(t)
        return True

    def fuse_now(self) -> bool:
        """Manual trigger used by the management endpoint."""
        with self._lock:
            if len(self.registry) == 0:
                return False
            t = max((rec.last_round for rec in self.robots.values()), default=0)
        self._fuse(t)
        return True

    def _fuse(self, t: int) -> None:
        with self._fusion_lock:
            labels = fuse_round(self.registry, self.bank, t=t,
                                aggregator=self.aggregator)
            with self._lock:
                self.labels = labels
                self.labels_round = t
                self.fusion_count += 1
                self.uploads_since_fusion = 0
                self._fused_through = max(self._fused_through, t)
                self._guide_cache.clear()  # labels changed

    def _guide_for(self, modality: ModalityId) -> PolicyModel:
        with self._lock:
            cached = self._guide_cache.get(modality)
            round_now = self.labels_round
            labels = self.labels
        if cached is not None and cached[0] == round_now:
            return cached[1]
        model, _ = train_guide(modality, self.bank, labels, self.net_spec,
                               self.guide_cfg)
        with self._lock:
            if self.labels_round == round_now:
                self._guide_cache[modality] = (round_now, model)
        return model

    # -- introspection ---------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            return {
                "mode": self.cfg.mode,
                "expected_robots": self.cfg.robots,
                "fusion_every": self.cfg.fusion_every,
                "registered": [
                    {"robot_id": rid, "modality": rec.modality.name.lower(),
                     "round": rec.last_round}
                    for rid, rec in sorted(self.robots.items())],
                "bank_size": self.bank.M,
                "fusion_count": self.fusion_count,
                "labels_round": self.labels_round,
                "has_labels": self.labels is not None,
                "pending_uploads": self.uploads_since_fusion,
                "cached_guides": sorted(m.name.lower()
                                        for m in self._guide_cache),
            }

    def label_rows(self) -> list[dict]:
        with self._lock:
            labels = list(self.labels) if self.labels else []
        return [{"scene_id": lab.scene_id, "label": lab.label,
                 "round": lab.round, "n_contributors": len(lab.contributors)}
                for lab in labels]
