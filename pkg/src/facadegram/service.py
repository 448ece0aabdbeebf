"""Local HTTP service exposing the pipeline to scripts and the browser UI.

Every endpoint is a thin wrapper over the library call of the same name;
the loaded model is immutable shared state and each request carries its own
seeds, so concurrent requests are independent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import evaluation, generator, grammar, render, sizing
from .decode import DecodeConfig, infer_procedure
from .generator import StyleParams, UnreachableNoiseLevel
from .model import CheckpointLoadFailure, load_checkpoint

MODEL_ENV_VAR = "FACAID_MODEL"


class BindFailure(Exception):
    """The server socket could not be bound."""


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    checkpoint: str | None = None
    cors: bool = False
    max_request_bytes: int = 4_000_000
    static_dir: str | None = None

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside [1, 65535]")


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "detail": detail})


def create_app(cfg: ServiceConfig | None = None) -> FastAPI:
    cfg = cfg or ServiceConfig()
    app = FastAPI(title="facadegram", docs_url=None, redoc_url=None)

    model = None
    vocab = None
    ckpt = cfg.checkpoint or os.environ.get(MODEL_ENV_VAR)
    if ckpt:
        model, vocab = load_checkpoint(ckpt)

    if cfg.cors:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                           allow_headers=["*"])

    @app.middleware("http")
    async def size_limit(request: Request, call_next):
        length = request.headers.get("content-length")
        if length and int(length) > cfg.max_request_bytes:
            return _error(413, "request_too_large",
                          f"body exceeds {cfg.max_request_bytes} bytes")
        return await call_next(request)

    @app.exception_handler(grammar.SchemaError)
    async def schema_error(_req, exc):
        return _error(400, "bad_request", str(exc))

    @app.exception_handler(grammar.InvalidTree)
    async def invalid_tree(_req, exc):
        return _error(400, "invalid_tree", str(exc))

    @app.exception_handler(ValueError)
    async def value_error(_req, exc):
        return _error(400, "bad_request", str(exc))

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise grammar.SchemaError("body", "request body is not valid JSON")
        if not isinstance(body, dict):
            raise grammar.SchemaError("body", "expected a JSON object")
        return body

    @app.get("/grammar")
    def get_grammar():
        return {
            "axiom": grammar.AXIOM,
            "terminals": list(grammar.TERMINALS),
            "productions": grammar.production_table(),
            "grammar_hash": grammar.grammar_hash(),
        }

    @app.post("/generate")
    async def post_generate(request: Request):
        body = await _json_body(request)
        seed = body.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise grammar.SchemaError("seed", "expected an integer seed")
        if "style" in body and body["style"] is not None:
            style = StyleParams.from_json(body["style"])
        else:
            style = generator.sample_style(seed)
        rec = generator.generate_facade(style, seed)
        return rec.to_json()

    @app.post("/execute")
    async def post_execute(request: Request):
        body = await _json_body(request)
        tree = grammar.tree_from_json(body.get("tree", body))
        report = grammar.validate_tree(tree)
        if not report.ok:
            first = report.violations[0]
            return _error(400, "invalid_tree",
                          f"at {list(first.path)}: {first.message}")
        layout = grammar.execute(tree)
        return grammar.layout_to_json(layout)

    @app.post("/infer")
    async def post_infer(request: Request):
        if model is None:
            return _error(409, "model_unavailable",
                          f"no checkpoint loaded; set --model or ${MODEL_ENV_VAR}")
        body = await _json_body(request)
        layout = grammar.layout_from_json(body.get("layout", body))
        temperature = float(body.get("temperature", 0.0))
        seed = int(body.get("seed", 0))
        tree = infer_procedure(model, layout, vocab,
                               DecodeConfig(temperature=temperature, seed=seed))
        return {
            "tree": grammar.tree_to_json(tree),
            "layout": grammar.layout_to_json(grammar.execute(tree)),
        }

    @app.post("/optimize")
    async def post_optimize(request: Request):
        body = await _json_body(request)
        tree = grammar.tree_from_json(body["tree"]) if "tree" in body else None
        if tree is None:
            raise grammar.SchemaError("tree", "missing procedure")
        if "target" not in body:
            raise grammar.SchemaError("target", "missing target layout")
        target = grammar.layout_from_json(body["target"])
        kwargs = body.get("cfg") or {}
        if not isinstance(kwargs, dict):
            raise grammar.SchemaError("cfg", "expected an object")
        try:
            opt_cfg = sizing.OptimizeConfig(**kwargs)
        except TypeError as e:
            raise grammar.SchemaError("cfg", str(e))
        fitted, trace = sizing.optimize_sizing(grammar.default_sizing(tree), target, opt_cfg)
        return {
            "tree": grammar.tree_to_json(fitted),
            "layout": grammar.layout_to_json(grammar.execute(fitted)),
            "trace": trace,
            "final_error": evaluation.pixel_classification_error(
                grammar.execute(fitted), target, 128),
        }

    @app.post("/render")
    async def post_render(request: Request):
        body = await _json_body(request)
        layout = grammar.layout_from_json(body.get("layout", body))
        svg = render.render_svg(layout, body.get("palette"))
        return Response(content=svg, media_type="image/svg+xml")

    @app.post("/noise")
    async def post_noise(request: Request):
        body = await _json_body(request)
        layout = grammar.layout_from_json(body.get("layout", body))
        level = float(body.get("level", 0.0))
        seed = int(body.get("seed", 0))
        try:
            noisy = generator.inject_noise(layout, level, seed)
        except UnreachableNoiseLevel as e:
            return _error(400, "unreachable_noise_level", str(e))
        measured = generator.measure_noise(layout, noisy, 256)
        return {"layout": grammar.layout_to_json(noisy), "measured": measured}

    if cfg.static_dir and os.path.isdir(cfg.static_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=cfg.static_dir, html=True), name="ui")

    return app


def serve(cfg: ServiceConfig) -> None:
    """Run the service until interrupted; raises BindFailure on socket errors."""
    import uvicorn

    app = create_app(cfg)
    try:
        uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
    except (OSError, SystemExit) as e:
        raise BindFailure(f"cannot serve on {cfg.host}:{cfg.port}: {e}") from e
