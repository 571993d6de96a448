"""Thin HTTP client for the cloud service.

One frame per request/response on POST /fil; Error replies surface as
CloudError with the server's code attached.
"""
from __future__ import annotations

import httpx

from . import protocol as proto
from .nn import PolicyModel, deserialize_params, serialize_params
from .obs import ModalityId

DEFAULT_TIMEOUT = 30.0


class CloudError(RuntimeError):
    def __init__(self, code: str, text: str = ""):
        super().__init__(f"{code}: {text}" if text else code)
        self.code = code
        self.text = text


class FilClient:
    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self._http = httpx.Client(base_url=self.base_url, timeout=timeout)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _exchange(self, msg):
        resp = self._http.post(
            "/fil", content=proto.encode(msg),
            headers={"content-type": "application/octet-stream"})
        resp.raise_for_status()
        reply = proto.decode(resp.content)
        if isinstance(reply, proto.Error):
            raise CloudError(reply.code, reply.text)
        return reply

    def hello(self, robot_id: str, modality: ModalityId) -> int:
        reply = self._exchange(proto.Hello(robot_id=robot_id, modality=modality))
        return reply.round

    def upload(self, robot_id: str, round: int, model: PolicyModel) -> int:
        """At-least-once upload; the server replaces idempotently."""
        reply = self._exchange(proto.UploadParams(
            robot_id=robot_id, round=round, params=serialize_params(model)))
        return reply.round

    def request_guide(self, robot_id: str, modality: ModalityId
                      ) -> tuple[PolicyModel, int]:
        reply = self._exchange(proto.RequestGuide(robot_id=robot_id,
                                                  modality=modality))
        return deserialize_params(reply.params), reply.fusion_round

    def fuse(self) -> dict:
        resp = self._http.post("/fuse")
        resp.raise_for_status()
        return resp.json()

    def status(self) -> dict:
        resp = self._http.get("/status")
        resp.raise_for_status()
        return resp.json()

    def labels(self) -> dict:
        resp = self._http.get("/labels")
        resp.raise_for_status()
        return resp.json()
