"""HTTP service exposing search and captioning over a trained checkpoint.

Endpoints:
  GET  /health          -> {"status": "ok"}
  GET  /search?q=&k=    -> {"results": [{"id", "uri", "score"}]} (scores at 6 dp)
  POST /caption         -> {"caption": str}; accepts a multipart upload under
                           the field name "image" or JSON {"image_b64": ...}
  GET  /image/{id}      -> the indexed image file (PNG)

Malformed requests get a 400 with a JSON error body.  The checkpoint
directory can be overridden with the CAPRET_CHECKPOINT_DIR environment
variable so deployments can swap models without touching flags.
"""

from __future__ import annotations

import base64
import binascii
import os
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from capret.data.images import ImageDecodeError, decode_image_bytes
from capret.evaluation import GenerationConfig, generate_caption
from capret.retrieval import RetrievalIndex, embed_query, load_index, search
from capret.training import load_checkpoint

MAX_K = 50


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(checkpoint_dir: str | os.PathLike | None = None, index_path: str | os.PathLike | None = None) -> FastAPI:
    """Build the app with the model and index loaded once at startup."""
    checkpoint_dir = os.environ.get("CAPRET_CHECKPOINT_DIR") or checkpoint_dir
    if not checkpoint_dir or not Path(checkpoint_dir).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_dir or '(no path given)'}")
    loaded = load_checkpoint(checkpoint_dir)
    index: RetrievalIndex | None = load_index(index_path) if index_path else None
    uri_by_id: dict[str, str] = dict(zip(index.ids, index.uris)) if index is not None else {}
    gen_cfg = GenerationConfig()

    app = FastAPI(title="capret", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    async def _on_validation_error(request: Request, exc: RequestValidationError):
        return _error(400, f"invalid request: {exc.errors()[0].get('msg', 'validation failed')}")

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/search")
    def search_endpoint(q: str = "", k: int = 10):
        if index is None:
            return _error(503, "no retrieval index loaded; start the service with an index")
        if not q.strip():
            return _error(400, "query parameter 'q' must be non-empty")
        if k < 1 or k > MAX_K:
            return _error(400, f"k must be between 1 and {MAX_K}")
        try:
            query_vec = embed_query(loaded.backbones, loaded.bridge, loaded.vocab, q)
        except ValueError as e:
            return _error(400, str(e))
        result = search(index, query_vec, k)
        return {
            "results": [
                {"id": image_id, "uri": uri_by_id[image_id], "score": round(float(score), 6)}
                for image_id, score in result.ranking
            ]
        }

    @app.post("/caption")
    async def caption_endpoint(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            upload = form.get("image")
            if upload is None or isinstance(upload, str):
                return _error(400, "multipart requests must carry a file under the field name 'image'")
            data = await upload.read()
        elif content_type.startswith("application/json"):
            try:
                payload = await request.json()
            except Exception:
                return _error(400, "request body is not valid JSON")
            if not isinstance(payload, dict) or not isinstance(payload.get("image_b64"), str):
                return _error(400, "JSON requests must carry a base64 string under 'image_b64'")
            try:
                data = base64.b64decode(payload["image_b64"], validate=True)
            except (binascii.Error, ValueError):
                return _error(400, "'image_b64' is not valid base64")
        else:
            return _error(400, "send either multipart/form-data with an 'image' file or JSON with 'image_b64'")
        try:
            image = decode_image_bytes(data)
        except ImageDecodeError as e:
            return _error(400, str(e))
        gen = generate_caption(loaded.backbones, loaded.bridge, image, loaded.vocab, gen_cfg)
        return {"caption": gen.text}

    @app.get("/image/{image_id:path}")
    def image_endpoint(image_id: str):
        uri = uri_by_id.get(image_id)
        if uri is None or not Path(uri).is_file():
            return _error(404, f"no indexed image with id {image_id!r}")
        return FileResponse(uri, media_type="image/png")

    return app
