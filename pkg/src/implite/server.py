"""Streaming HTTP chat service over a loaded model.

Endpoints:
    POST /v1/chat   chat turn; stream=true yields newline-delimited JSON
                    token events over chunked transfer, ending in a done
                    event carrying stage timings
    GET  /v1/stats  model info plus rolling medians over completed turns

Sessions live in memory behind client-supplied opaque ids (LRU-evicted);
a request without a session id is stateless. Optionally serves a static
directory so the web UI and the API share an origin.
"""

from __future__ import annotations

import base64
import binascii
import json
import mimetypes
import statistics
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import CapacityError, ImpError, TemplateError
from .llm import GenerationConfig
from .profiler import StageTimings
from .runner import Conversation, ImpModel
from .vision import MODE_PAD, load_image_rgb

DEFAULT_MAX_IMAGE_BYTES = 8 * 1024 * 1024
DEFAULT_MAX_SESSIONS = 64


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class Session:
    conversation: Conversation
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """LRU map of opaque session ids to conversations.

    Ids are client-generated, so a never-seen id starts a new session; an id
    that was evicted is gone for good and continuing it is a 404.
    """

    def __init__(self, model: ImpModel, max_sessions: int = DEFAULT_MAX_SESSIONS):
        self.model = model
        self.max_sessions = max_sessions
        self._sessions: OrderedDict[str, Session] = OrderedDict()
        self._evicted: OrderedDict[str, None] = OrderedDict()
        self._lock = threading.Lock()

    def get_or_create(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None:
                self._sessions.move_to_end(session_id)
                return session
            if session_id in self._evicted:
                raise RequestError(
                    404, f"unknown session_id {session_id!r} (evicted); start a new session"
                )
            session = Session(self.model.new_conversation())
            self._sessions[session_id] = session
            while len(self._sessions) > self.max_sessions:
                old_id, _ = self._sessions.popitem(last=False)
                self._evicted[old_id] = None
                while len(self._evicted) > 16 * self.max_sessions:
                    self._evicted.popitem(last=False)
            return session

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


class ChatService:
    """Request validation and turn execution, independent of HTTP plumbing."""

    def __init__(
        self,
        model: ImpModel,
        max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES,
        max_sessions: int = DEFAULT_MAX_SESSIONS,
        workers: int | None = None,
    ):
        self.model = model
        self.max_image_bytes = max_image_bytes
        self.sessions = SessionStore(model, max_sessions)
        self._stats_lock = threading.Lock()
        self._completed: list[StageTimings] = []
        import os

        self._gen_slots = threading.BoundedSemaphore(workers or os.cpu_count() or 1)

    # -- request parsing ----------------------------------------------------

    def parse_chat_request(self, body: bytes) -> dict:
        try:
            payload = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise RequestError(400, f"malformed JSON body: {e}") from e
        if not isinstance(payload, dict):
            raise RequestError(400, "request body must be a JSON object")
        messages = payload.get("messages")
        if not isinstance(messages, list) or not messages:
            raise RequestError(400, "messages must be a non-empty list")
        for i, msg in enumerate(messages):
            if not isinstance(msg, dict) or msg.get("role") not in ("user", "assistant"):
                raise RequestError(400, f"message {i} needs a role of user or assistant")
            if not isinstance(msg.get("content", ""), str):
                raise RequestError(400, f"message {i} content must be a string")
            expected = "user" if i % 2 == 0 else "assistant"
            if msg["role"] != expected:
                raise RequestError(400, "roles must alternate starting with user")
        if messages[-1]["role"] != "user":
            raise RequestError(400, "the last message must be from the user")
        return payload

    def decode_image(self, image_b64: str):
        estimated = len(image_b64) * 3 // 4
        if estimated > self.max_image_bytes:
            raise RequestError(
                413, f"image of ~{estimated} bytes exceeds the {self.max_image_bytes} byte limit"
            )
        try:
            raw = base64.b64decode(image_b64, validate=True)
        except (binascii.Error, ValueError) as e:
            raise RequestError(400, f"image_b64 is not valid base64: {e}") from e
        if len(raw) > self.max_image_bytes:
            raise RequestError(
                413, f"image of {len(raw)} bytes exceeds the {self.max_image_bytes} byte limit"
            )
        try:
            return load_image_rgb(raw)
        except Exception as e:
            raise RequestError(400, f"image_b64 does not decode as an image: {e}") from e

    def generation_config(self, payload: dict) -> GenerationConfig:
        raw = payload.get("generation", {})
        if not isinstance(raw, dict):
            raise RequestError(400, "generation must be an object")
        eos = self.model.tokenizer.special_tokens["eos"]
        try:
            return GenerationConfig(
                max_new_tokens=int(raw.get("max_new_tokens", 64)),
                temperature=float(raw.get("temperature", 0.0)),
                top_p=float(raw.get("top_p", 1.0)),
                seed=int(raw.get("seed", 0)),
                stop_ids=frozenset(raw.get("stop_ids", [eos])),
            )
        except (TypeError, ValueError) as e:
            raise RequestError(400, f"invalid generation config: {e}") from e

    # -- turn execution -----------------------------------------------------

    def resolve_session(self, payload: dict) -> tuple[Session | None, list[dict]]:
        """Returns (session or None for stateless, messages to process now)."""
        messages = payload["messages"]
        session_id = payload.get("session_id")
        if session_id is None:
            return None, messages
        if not isinstance(session_id, str) or not session_id:
            raise RequestError(400, "session_id must be a non-empty string")
        session = self.sessions.get_or_create(session_id)
        if session.conversation.history:
            # history lives server-side; only the new user turn is processed
            return session, [messages[-1]]
        return session, messages

    def run_turn(self, payload: dict, on_text=None):
        """Execute a chat request; returns (text, StageTimings)."""
        session, messages = self.resolve_session(payload)
        cfg = self.generation_config(payload)
        conversation = session.conversation if session else self.model.new_conversation()
        lock = session.lock if session else threading.Lock()
        with lock, self._gen_slots:
            try:
                result = self._replay_and_generate(conversation, messages, cfg, on_text)
            except CapacityError as e:
                raise RequestError(
                    409, f"context window exhausted ({e}); start a new session"
                ) from e
            except TemplateError as e:
                raise RequestError(400, str(e)) from e
        timings = StageTimings.from_turn(result)
        with self._stats_lock:
            self._completed.append(timings)
        return result.text, timings

    def _replay_and_generate(self, conversation, messages, cfg, on_text):
        """Prefill prior exchanges as plain context, then generate for the last turn."""
        *context, last = messages
        for i in range(0, len(context), 2):
            user = context[i]
            assistant = context[i + 1] if i + 1 < len(context) else {}
            image = self.decode_image(user["image_b64"]) if user.get("image_b64") else None
            conversation.prime_turn(
                user.get("content", ""), assistant.get("content", ""), image
            )
        image = self.decode_image(last["image_b64"]) if last.get("image_b64") else None
        return conversation.user_turn(last.get("content", ""), image, cfg, MODE_PAD, on_text)

    # -- stats ---------------------------------------------------------------

    def stats(self) -> dict:
        with self._stats_lock:
            completed = list(self._completed)
        prompt_speeds = [t.s_prompt for t in completed if t.s_prompt]
        gen_speeds = [t.s_gen for t in completed if t.s_gen]
        return {
            "model": {
                "name": self.model.name,
                "precision": self.model.precision,
                "size_bytes": self.model.size_bytes,
                "n_visual_tokens": self.model.n_visual_tokens,
            },
            "runs": {
                "count": len(completed),
                "median_s_prompt": statistics.median(prompt_speeds) if prompt_speeds else None,
                "median_s_gen": statistics.median(gen_speeds) if gen_speeds else None,
            },
        }


class ImpServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: ChatService, cors_origin=None, static_dir=None):
        super().__init__(address, _Handler)
        self.service = service
        self.cors_origin = cors_origin
        self.static_dir = Path(static_dir).resolve() if static_dir else None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: ImpServer

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- plumbing -------------------------------------------------------------

    def _cors(self):
        origin = self.server.cors_origin
        if origin:
            self.send_header("Access-Control-Allow-Origin", origin)
            self.send_header("Vary", "Origin")

    def _send_json(self, status: int, obj) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _read_body(self) -> bytes:
        length = self.headers.get("Content-Length")
        if length is None:
            raise RequestError(411, "Content-Length required")
        return self.rfile.read(int(length))

    # -- handlers ---------------------------------------------------------------

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        if self.path.split("?")[0] == "/v1/stats":
            self._send_json(200, self.server.service.stats())
            return
        if self.server.static_dir is not None:
            self._serve_static()
            return
        self._send_error_json(404, f"no handler for GET {self.path}")

    def do_POST(self):
        if self.path.split("?")[0] != "/v1/chat":
            self._send_error_json(404, f"no handler for POST {self.path}")
            return
        try:
            payload = self.server.service.parse_chat_request(self._read_body())
            if payload.get("stream"):
                self._stream_chat(payload)
            else:
                text, timings = self.server.service.run_turn(payload)
                self._send_json(200, {"text": text, "stats": timings.to_dict()})
        except RequestError as e:
            self._send_error_json(e.status, e.message)
        except ImpError as e:
            self._send_error_json(500, str(e))

    def _stream_chat(self, payload: dict) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Transfer-Encoding", "chunked")
        self.send_header("Cache-Control", "no-store")
        self._cors()
        self.end_headers()

        index = 0

        def write_event(obj) -> None:
            data = (json.dumps(obj) + "\n").encode("utf-8")
            self.wfile.write(f"{len(data):X}\r\n".encode("ascii") + data + b"\r\n")
            self.wfile.flush()

        def on_text(_token_id: int, piece: str) -> None:
            nonlocal index
            write_event({"type": "token", "text": piece, "index": index})
            index += 1

        try:
            _, timings = self.server.service.run_turn(payload, on_text=on_text)
            write_event({"type": "done", "stats": timings.to_dict()})
        except RequestError as e:
            # too late for an HTTP status once the stream started
            write_event({"type": "error", "status": e.status, "message": e.message})
        except ImpError as e:
            write_event({"type": "error", "status": 500, "message": str(e)})
        self.wfile.write(b"0\r\n\r\n")

    def _serve_static(self) -> None:
        root = self.server.static_dir
        rel = self.path.split("?")[0].lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if root not in target.parents and target != root:
            self._send_error_json(404, "not found")
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._send_error_json(404, f"no such file: /{rel}")
            return
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)


def make_server(
    model: ImpModel,
    host: str = "127.0.0.1",
    port: int = 8080,
    max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES,
    workers: int | None = None,
    cors_origin: str | None = None,
    static_dir=None,
    max_sessions: int = DEFAULT_MAX_SESSIONS,
) -> ImpServer:
    service = ChatService(model, max_image_bytes, max_sessions, workers)
    return ImpServer((host, port), service, cors_origin, static_dir)


def serve_forever(server: ImpServer) -> None:
    host, port = server.server_address[:2]
    print(f"imp serve: listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
