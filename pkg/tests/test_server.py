import base64
import json
import threading

import httpx
import pytest

from implite import testing
from implite.runner import ImpModel
from implite.server import make_server


@pytest.fixture(scope="module")
def server_base(tiny_model_path):
    model = ImpModel.load(tiny_model_path)
    server = make_server(model, port=0, max_image_bytes=64 * 1024, max_sessions=4)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", server
    server.shutdown()


@pytest.fixture()
def base(server_base):
    return server_base[0]


def chat_body(text, image_b64=None, stream=False, session_id=None, max_new=6, seed=0):
    msg = {"role": "user", "content": text}
    if image_b64:
        msg["image_b64"] = image_b64
    body = {
        "messages": [msg],
        "stream": stream,
        "generation": {"max_new_tokens": max_new, "temperature": 0.0, "seed": seed,
                       "stop_ids": []},
    }
    if session_id:
        body["session_id"] = session_id
    return body


def png_b64(seed=0, width=32, height=24):
    import io
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(testing.random_rgb(seed, width, height)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def stream_events(base, body):
    events = []
    with httpx.stream("POST", f"{base}/v1/chat", json=body, timeout=120) as r:
        assert r.status_code == 200
        for line in r.iter_lines():
            if line:
                events.append(json.loads(line))
    return events


class TestChatEndpoint:
    def test_single_turn_with_image_accounting(self, base, tiny_model):
        events = stream_events(base, chat_body("what is in the image", png_b64(1), stream=True))
        kinds = [e["type"] for e in events]
        assert kinds.count("token") >= 1
        assert kinds[-1] == "done"
        stats = events[-1]["stats"]
        assert stats["n_prompt"] > tiny_model.n_visual_tokens
        indices = [e["index"] for e in events if e["type"] == "token"]
        assert indices == list(range(len(indices)))

    def test_non_stream_deterministic_bytes(self, base):
        r1 = httpx.post(f"{base}/v1/chat", json=chat_body("same again"), timeout=120)
        r2 = httpx.post(f"{base}/v1/chat", json=chat_body("same again"), timeout=120)
        assert r1.status_code == r2.status_code == 200
        assert json.loads(r1.content)["text"] == json.loads(r2.content)["text"]
        a, b = json.loads(r1.content), json.loads(r2.content)
        a["stats"] = b["stats"] = None  # timings differ run to run
        assert a == b

    def test_streamed_equals_non_streamed_text(self, base):
        non_stream = httpx.post(
            f"{base}/v1/chat", json=chat_body("stream parity", seed=3), timeout=120
        ).json()
        events = stream_events(base, chat_body("stream parity", stream=True, seed=3))
        streamed = "".join(e["text"] for e in events if e["type"] == "token")
        assert streamed == non_stream["text"]

    def test_malformed_json_400(self, base):
        r = httpx.post(
            f"{base}/v1/chat", content=b"{nope", headers={"Content-Type": "application/json"}
        )
        assert r.status_code == 400
        assert "JSON" in r.json()["error"]

    def test_bad_roles_400(self, base):
        body = {"messages": [{"role": "assistant", "content": "hi"}], "stream": False}
        assert httpx.post(f"{base}/v1/chat", json=body).status_code == 400

    def test_non_image_b64_400(self, base):
        junk = base64.b64encode(b"this is not a png").decode()
        r = httpx.post(f"{base}/v1/chat", json=chat_body("x", image_b64=junk), timeout=60)
        assert r.status_code == 400
        assert "image" in r.json()["error"]

    def test_oversize_image_413(self, base):
        big = base64.b64encode(b"\x00" * (128 * 1024)).decode()
        r = httpx.post(f"{base}/v1/chat", json=chat_body("x", image_b64=big), timeout=60)
        assert r.status_code == 413

    def test_context_overflow_409(self, base):
        sid = "overflow-session"
        # context_len is 1024; each image turn costs ~220 positions
        for _ in range(5):
            r = httpx.post(
                f"{base}/v1/chat",
                json=chat_body("fill it up", png_b64(2), session_id=sid, max_new=8),
                timeout=120,
            )
            if r.status_code == 409:
                break
        else:
            pytest.fail("never hit the context limit")
        assert "session" in r.json()["error"]

    def test_unknown_method_404(self, base):
        assert httpx.post(f"{base}/v1/nope", json={}).status_code == 404


class TestSessions:
    def test_isolation_between_sessions(self, base):
        # interleave two sessions; A's replies must match an uninterleaved replay
        def turn(sid, text):
            return httpx.post(
                f"{base}/v1/chat", json=chat_body(text, session_id=sid, max_new=6), timeout=120
            ).json()["text"]

        a1 = turn("sess-a", "alpha first")
        turn("sess-b", "bravo noise")
        a2 = turn("sess-a", "alpha second")
        turn("sess-b", "more bravo")

        c1 = turn("sess-c", "alpha first")
        c2 = turn("sess-c", "alpha second")
        assert (a1, a2) == (c1, c2)

    def test_session_reuses_one_conversation(self, tiny_model):
        # the same Conversation (and KV cache) must carry across requests
        from implite.server import ChatService

        service = ChatService(tiny_model)
        service.run_turn(chat_body("seed turn", session_id="cont"))
        session = service.sessions.get_or_create("cont")
        depth_after_first = session.conversation.context_used
        assert depth_after_first > 0
        service.run_turn(chat_body("and again", session_id="cont"))
        assert session.conversation.context_used > depth_after_first
        assert len(session.conversation.history) == 4

    def test_evicted_session_404(self, base):
        old = "evict-me"
        httpx.post(f"{base}/v1/chat", json=chat_body("hold", session_id=old), timeout=120)
        for i in range(5):  # max_sessions=4 pushes the old one out
            httpx.post(
                f"{base}/v1/chat", json=chat_body("filler", session_id=f"filler-{i}"),
                timeout=120,
            )
        r = httpx.post(f"{base}/v1/chat", json=chat_body("back again", session_id=old),
                       timeout=120)
        assert r.status_code == 404

    def test_stateless_history_replay(self, base):
        body = {
            "messages": [
                {"role": "user", "content": "context line"},
                {"role": "assistant", "content": "noted"},
                {"role": "user", "content": "actual question"},
            ],
            "stream": False,
            "generation": {"max_new_tokens": 5, "temperature": 0.0, "stop_ids": []},
        }
        r = httpx.post(f"{base}/v1/chat", json=body, timeout=120)
        assert r.status_code == 200
        fresh = httpx.post(f"{base}/v1/chat", json=chat_body("actual question", max_new=5),
                           timeout=120)
        assert r.json()["text"] != fresh.json()["text"]


class TestStatsEndpoint:
    def test_fresh_and_after_one_chat(self, tiny_model_path):
        model = ImpModel.load(tiny_model_path)
        server = make_server(model, port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            fresh = httpx.get(f"{base}/v1/stats").json()
            assert fresh["runs"] == {"count": 0, "median_s_prompt": None, "median_s_gen": None}
            assert fresh["model"]["n_visual_tokens"] == model.n_visual_tokens

            done = httpx.post(f"{base}/v1/chat", json=chat_body("one run"), timeout=120).json()
            after = httpx.get(f"{base}/v1/stats").json()
            assert after["runs"]["count"] == 1
            assert after["runs"]["median_s_prompt"] == pytest.approx(done["stats"]["s_prompt"])
            assert after["runs"]["median_s_gen"] == pytest.approx(done["stats"]["s_gen"])
        finally:
            server.shutdown()

    def test_size_matches_inspect_total(self, base, tiny_model_path):
        from implite.container import inspect_container

        stats = httpx.get(f"{base}/v1/stats").json()
        assert stats["model"]["size_bytes"] == inspect_container(tiny_model_path).total_bytes


class TestCors:
    def test_cors_headers_present_when_configured(self, tiny_model_path):
        model = ImpModel.load(tiny_model_path)
        server = make_server(model, port=0, cors_origin="http://localhost:5173")
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            r = httpx.get(f"{base}/v1/stats")
            assert r.headers["access-control-allow-origin"] == "http://localhost:5173"
            pre = httpx.request("OPTIONS", f"{base}/v1/chat")
            assert pre.status_code == 204
            assert "POST" in pre.headers["access-control-allow-methods"]
        finally:
            server.shutdown()


class TestStaticDir:
    def test_serves_files_and_guards_traversal(self, tiny_model_path, tmp_path):
        (tmp_path / "index.html").write_text("<html>ui</html>")
        (tmp_path / "app.js").write_text("console.log('hi')")
        model = ImpModel.load(tiny_model_path)
        server = make_server(model, port=0, static_dir=tmp_path)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            assert httpx.get(f"{base}/").text == "<html>ui</html>"
            js = httpx.get(f"{base}/app.js")
            assert js.status_code == 200
            assert "javascript" in js.headers["content-type"]
            assert httpx.get(f"{base}/../etc/passwd").status_code in (404, 400)
            assert httpx.get(f"{base}/missing.js").status_code == 404
        finally:
            server.shutdown()
