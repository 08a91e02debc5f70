import json
import asyncio
import logging
import threading

from aiohttp import web

from fissionserve.utils_control import ControlPlane
from fissionserve.utils_errors import ConfigError, FissionError, ManifestError
from fissionserve.utils_tasks import AppManifest, ChatRequest

logger = logging.getLogger("FissionServe")

NDJSON = "application/x-ndjson"


async def _blocking(fn, *args):
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(None, fn, *args)


async def _json_body(request):
    try:
        return await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ManifestError(f"request body is not valid JSON: {err}") from None


@web.middleware
async def error_middleware(request, handler):
    try:
        return await handler(request)
    except web.HTTPException:
        raise
    except FissionError as err:
        if err.user_error:
            logger.warning("%s %s: %s", request.method, request.path, err.message)
        else:
            logger.error("%s %s failed: %s", request.method, request.path, err.message)
        return web.json_response(err.to_dict(), status=err.http_status)
    except Exception as err:
        logger.exception("%s %s failed", request.method, request.path)
        return web.json_response({"error": "internal_error", "message": str(err)}, status=500)


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


async def handle_register(request):
    """POST /apps with a manifest, or {"manifest": ..., "plan": ...}."""
    control = request.app["control"]
    body = await _json_body(request)
    plan = None
    if isinstance(body, dict) and "manifest" in body:
        plan = body.get("plan")
        body = body["manifest"]
    if not isinstance(body, dict):
        raise ManifestError("manifest must be a JSON object")
    manifest = AppManifest.from_dict(body)
    app_id = await _blocking(control.register_app, manifest, plan)
    return web.json_response({"app_id": app_id}, status=201)


async def handle_list(request):
    state = await _blocking(request.app["control"].state)
    return web.json_response({"apps": state["apps"]})


async def handle_deregister(request):
    control = request.app["control"]
    force = request.query.get("force", "false").lower() in ("1", "true", "yes")
    await _blocking(control.deregister_app, request.match_info["app_id"], force)
    return web.json_response({"ok": True})


async def handle_invoke(request):
    """POST /apps/{app_id}/invoke, streaming one JSON object per line."""
    control = request.app["control"]
    body = await _json_body(request)
    if not isinstance(body, dict):
        raise ManifestError("request must be a JSON object")
    try:
        chat = ChatRequest.from_dict(body)
    except (KeyError, TypeError, ValueError) as err:
        raise ManifestError(f"malformed request: {err}") from None
    chunks, trace = await _blocking(control.invoke, request.match_info["app_id"], chat)

    response = web.StreamResponse(headers={"Content-Type": NDJSON})
    await response.prepare(request)
    iterator = iter(chunks)
    while True:
        try:
            chunk = await _blocking(next, iterator, None)
        except FissionError as err:
            logger.error("Request %s failed mid-stream: %s", chat.request_id, err.message)
            await response.write(_line(err.to_dict()))
            break
        if chunk is None:
            await response.write(_line({"done": True, "request_id": chat.request_id}))
            break
        await response.write(_line(chunk))
    await response.write_eof()
    logger.debug("Request %s streamed (trace %s)", chat.request_id, trace.request_id)
    return response


def _line(obj):
    return (json.dumps(obj) + "\n").encode("utf-8")


async def handle_state(request):
    return web.json_response(await _blocking(request.app["control"].state))


async def handle_metrics(request):
    return web.json_response(await _blocking(request.app["control"].metrics))


async def handle_shutdown(request):
    request.app["stop"].set()
    return web.json_response({"ok": True})


async def handle_health(request):
    return web.json_response({"status": "ok"})


def create_app(control, stop=None):
    app = web.Application(middlewares=[error_middleware])
    app["control"] = control
    app["stop"] = stop or threading.Event()
    app.router.add_get("/health", handle_health)
    app.router.add_post("/apps", handle_register)
    app.router.add_get("/apps", handle_list)
    app.router.add_delete("/apps/{app_id}", handle_deregister)
    app.router.add_post("/apps/{app_id}/invoke", handle_invoke)
    app.router.add_get("/state", handle_state)
    app.router.add_get("/metrics", handle_metrics)
    app.router.add_post("/shutdown", handle_shutdown)
    return app


# ---------------------------------------------------------------------------
# Running cluster
# ---------------------------------------------------------------------------


class Cluster:
    """A control plane plus its gateway, served from a background thread."""

    def __init__(self, config, control=None):
        self.config = config
        self.control = control or ControlPlane(config)
        self.stop_requested = threading.Event()
        self.app = create_app(self.control, self.stop_requested)
        self.loop = asyncio.new_event_loop()
        self.runner = None
        self._thread = None

    @property
    def url(self):
        return self.config.gateway_url

    def start(self):
        self.control.start()
        ready = threading.Event()
        failure = {}

        def serve():
            asyncio.set_event_loop(self.loop)
            try:
                self.loop.run_until_complete(self._start_site())
            except OSError as err:
                failure["error"] = err
                ready.set()
                return
            ready.set()
            self.loop.run_forever()

        self._thread = threading.Thread(target=serve, name="gateway", daemon=True)
        self._thread.start()
        ready.wait()
        if "error" in failure:
            self.control.shutdown()
            port = self.config.ports["gateway"]
            raise ConfigError(f"gateway port {port} is unavailable: {failure['error']}")
        logger.info("Gateway listening on %s (%d GPUs)", self.url, self.config.gpu_count)
        return self

    async def _start_site(self):
        self.runner = web.AppRunner(self.app)
        await self.runner.setup()
        site = web.TCPSite(self.runner, self.config.host, self.config.ports["gateway"])
        await site.start()

    def wait(self):
        """Block until POST /shutdown or KeyboardInterrupt."""
        try:
            while not self.stop_requested.wait(0.5):
                pass
        except KeyboardInterrupt:
            logger.info("Interrupted")

    def down(self):
        if self._thread is not None:
            asyncio.run_coroutine_threadsafe(self.runner.cleanup(), self.loop).result(timeout=10)
            self.loop.call_soon_threadsafe(self.loop.stop)
            self._thread.join(timeout=10)
            self._thread = None
        self.control.shutdown()
        self.loop.close()
        logger.info("Cluster down")


def up(config, control=None):
    """Start a control plane and its gateway; returns the running Cluster."""
    return Cluster(config, control).start()
