import http.server
import io
import threading
from importlib import resources
from pathlib import Path

import pytest
from PIL import Image

from countclip.backends import make_synthetic_task

ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status}  {name}  {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion still decides the test outcome."""

    def record(name: str, ok: bool | None, detail: str = ""):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        ACCEPTANCE_RESULTS.append((name, status, detail))
        print(f"{status}  {name}  {detail}")
        return ok

    return record


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return Path(str(resources.files("countclip") / "data" / "fixtures"))


@pytest.fixture(scope="session")
def synthetic_task():
    return make_synthetic_task(seed=0)


def png_bytes(color=(10, 20, 30)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (4, 4), color).save(buf, format="PNG")
    return buf.getvalue()


class StubImageServer:
    """Local HTTP server: ``/ok/<name>`` serves a PNG, ``/garbage`` non-image bytes,
    ``/flaky`` fails with 503 once then succeeds, anything else is 404."""

    def __init__(self):
        self.hits: list[str] = []
        self.flaky_failures = 1
        server = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_GET(self):
                server.hits.append(self.path)
                if self.path.startswith("/ok/"):
                    body = png_bytes((len(self.path) * 7 % 256, 40, 90))
                    self.send_response(200)
                elif self.path == "/garbage":
                    body = b"definitely not an image"
                    self.send_response(200)
                elif self.path == "/flaky":
                    if server.flaky_failures > 0:
                        server.flaky_failures -= 1
                        body = b""
                        self.send_response(503)
                    else:
                        body = png_bytes()
                        self.send_response(200)
                else:
                    body = b"not found"
                    self.send_response(404)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def url(self, path: str) -> str:
        return self.base + path


@pytest.fixture
def image_server():
    server = StubImageServer()
    server.thread.start()
    yield server
    server.httpd.shutdown()
    server.httpd.server_close()
