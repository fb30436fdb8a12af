"""Server-in-a-thread helper for protocol tests over a real socket."""

import threading
import time

import pytest
import uvicorn


class ServerThread:
    def __init__(self, app):
        self._config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    def start(self) -> str:
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start in time")
            time.sleep(0.01)
        port = self._server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5)


@pytest.fixture
def run_server():
    servers = []

    def _run(app) -> str:
        server = ServerThread(app)
        servers.append(server)
        return server.start()

    yield _run
    for server in servers:
        server.stop()
