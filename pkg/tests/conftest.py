"""Shared fixtures: an in-thread uvicorn server for networked tests."""
import socket
import threading
import time

import pytest
import uvicorn


class ServerHandle:
    def __init__(self, server, thread, host, port):
        self.server = server
        self.thread = thread
        self.host = host
        self.port = port
        self.base_url = f"http://{host}:{port}"

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


def start_uvicorn(app, host="127.0.0.1") -> ServerHandle:
    """Serve an ASGI app on an ephemeral port in a daemon thread."""
    config = uvicorn.Config(app, host=host, port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("uvicorn did not start within 10 s")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    return ServerHandle(server, thread, host, port)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def uvicorn_server():
    handles = []

    def _start(app):
        handle = start_uvicorn(app)
        handles.append(handle)
        return handle

    yield _start
    for handle in handles:
        handle.stop()
