"""HTTP facade over the full identification pipeline.

Every image request runs the same stage sequence: decode, detect, require
exactly one muzzle, crop, check the crop is big enough, preprocess, embed.
Aborts surface as machine-readable codes from a closed taxonomy, so
clients can branch on them without parsing prose. Verification and
identification never write to the gallery; enrollment serializes through
the gallery's own lock.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .detector import CONF_THRESHOLD, detect
from .embedder import embed
from .errors import (DecodeError, DuplicateId, EmptyCrop, EmptyGallery,
                     ModelError, NotEnrolled, SpecError)
from .gallery import (DEFAULT_DIM, EnrollmentRecord, GalleryStore,
                      METADATA_KEYS, load_gallery)
from .imgproc import PreprocessParams, crop, decode_image, preprocess
from .neuralcore import load_checkpoint

MIN_CROP_SIDE = 64

CODE_NO_MUZZLE = "NO_MUZZLE"
CODE_MULTIPLE_MUZZLES = "MULTIPLE_MUZZLES"
CODE_CROP_TOO_SMALL = "CROP_TOO_SMALL"
CODE_DECODE_ERROR = "DECODE_ERROR"
CODE_DUPLICATE_ID = "DUPLICATE_ID"
CODE_NOT_ENROLLED = "NOT_ENROLLED"
CODE_EMPTY_GALLERY = "EMPTY_GALLERY"
CODE_MALFORMED = "MALFORMED_REQUEST"

PIPELINE_CODES = (CODE_NO_MUZZLE, CODE_MULTIPLE_MUZZLES,
                  CODE_CROP_TOO_SMALL, CODE_DECODE_ERROR)


@dataclass
class PipelineResult:
    stage: str
    box_count: int
    crop_size: tuple
    embedding: np.ndarray = None
    error_code: str = None

    def __post_init__(self):
        if (self.error_code is None) == (self.embedding is None):
            raise SpecError("exactly one of embedding and error_code is set")

    @property
    def ok(self):
        return self.error_code is None


def run_pipeline(data, embed_net, detect_net,
                 conf_threshold=CONF_THRESHOLD, min_crop=MIN_CROP_SIDE,
                 preprocess_params=None):
    """Image bytes to an embedding, or the first failing stage's code."""
    try:
        image = decode_image(data)
    except DecodeError:
        return PipelineResult(stage="decode", box_count=0, crop_size=(0, 0),
                              error_code=CODE_DECODE_ERROR)
    boxes = detect(detect_net, image, conf_threshold=conf_threshold)
    if len(boxes) == 0:
        return PipelineResult(stage="detect", box_count=0, crop_size=(0, 0),
                              error_code=CODE_NO_MUZZLE)
    if len(boxes) > 1:
        return PipelineResult(stage="detect", box_count=len(boxes),
                              crop_size=(0, 0),
                              error_code=CODE_MULTIPLE_MUZZLES)
    h, w = image.shape
    x0, y0, x1, y1 = boxes[0].to_pixels(w, h)
    try:
        region = crop(image, math.floor(x0), math.floor(y0),
                      math.ceil(x1), math.ceil(y1))
    except EmptyCrop:
        return PipelineResult(stage="crop", box_count=1, crop_size=(0, 0),
                              error_code=CODE_CROP_TOO_SMALL)
    if min(region.shape) < min_crop:
        return PipelineResult(stage="crop", box_count=1,
                              crop_size=region.shape,
                              error_code=CODE_CROP_TOO_SMALL)
    prepped = preprocess(region, out_size=embed_net.spec.input_shape[1],
                         params=preprocess_params)
    vector = embed(embed_net, prepped)
    return PipelineResult(stage="embed", box_count=1,
                          crop_size=region.shape, embedding=vector)


@dataclass
class ServiceRuntime:
    embed_net: object
    detect_net: object
    gallery: GalleryStore
    preprocess_params: PreprocessParams


def load_runtime(checkpoint, detector_checkpoint, gallery_path,
                 threshold_override=None):
    """Load both networks and open (or create) the gallery.

    The decision threshold comes from the embedder checkpoint unless
    overridden; an existing gallery keeps its own stored records but takes
    the resolved threshold for this serving session. Preprocessing knobs
    recorded at training time travel with the checkpoint, so probes are
    enhanced exactly the way training images were.
    """
    for label, path in (("embedder", checkpoint),
                        ("detector", detector_checkpoint)):
        if not Path(path).exists():
            raise ModelError(f"no {label} checkpoint at {path}")
    embed_net, _, meta = load_checkpoint(checkpoint)
    detect_net, _, _ = load_checkpoint(detector_checkpoint)
    threshold = threshold_override if threshold_override is not None \
        else meta.get("threshold", 0.0)
    if not threshold > 0.0:
        raise SpecError(f"decision threshold must be positive, got "
                        f"{threshold}; train longer or pass an override")
    params = PreprocessParams.from_dict(meta["preprocess"]) \
        if "preprocess" in meta else PreprocessParams()
    dim = embed_net.out_shape[0]
    gallery_path = Path(gallery_path)
    if gallery_path.exists():
        gallery = load_gallery(gallery_path)
        if gallery.dim != dim:
            raise SpecError(f"gallery dimension {gallery.dim} does not "
                            f"match embedder dimension {dim}")
        gallery.threshold = float(threshold)
    else:
        gallery = GalleryStore(dim=dim, threshold=float(threshold),
                               path=gallery_path)
    return ServiceRuntime(embed_net=embed_net, detect_net=detect_net,
                          gallery=gallery, preprocess_params=params)


def _error(status, code, detail):
    return JSONResponse({"code": code, "detail": detail},
                        status_code=status)


def _pipeline_error(result):
    details = {
        CODE_DECODE_ERROR: "image bytes could not be decoded",
        CODE_NO_MUZZLE: "no muzzle detected",
        CODE_MULTIPLE_MUZZLES:
            f"{result.box_count} muzzles detected, need exactly one",
        CODE_CROP_TOO_SMALL:
            f"crop {result.crop_size[1]}x{result.crop_size[0]} below "
            f"{MIN_CROP_SIDE}x{MIN_CROP_SIDE}",
    }
    return _error(422, result.error_code, details[result.error_code])


def _record_json(record):
    return {"cattle_id": record.cattle_id, "metadata": record.metadata,
            "enrolled_at": record.enrolled_at}


def create_app(embed_net, detect_net, gallery,
               conf_threshold=CONF_THRESHOLD, preprocess_params=None):
    app = FastAPI(title="muzzleid", docs_url=None, redoc_url=None)
    # the operator console is served from its own origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    async def _embed_upload(image):
        if image is None:
            return None, _error(400, CODE_MALFORMED, "image part required")
        data = await image.read()
        result = run_pipeline(data, embed_net, detect_net,
                              conf_threshold=conf_threshold,
                              preprocess_params=preprocess_params)
        if not result.ok:
            return None, _pipeline_error(result)
        return result.embedding, None

    @app.post("/api/v1/cattle/enroll", status_code=201)
    async def enroll(image: UploadFile = File(None),
                     cattle_id: str = Form(None),
                     breed: str = Form(None), gender: str = Form(None),
                     date_of_birth: str = Form(None),
                     disease_history: str = Form(None),
                     vaccine_history: str = Form(None),
                     extras: str = Form(None)):
        if not cattle_id:
            return _error(400, CODE_MALFORMED, "cattle_id field required")
        metadata = {}
        named = (breed, gender, date_of_birth, disease_history,
                 vaccine_history)
        for key, value in zip(METADATA_KEYS, named):
            if value is not None:
                metadata[key] = value
        if extras is not None:
            try:
                extra_map = json.loads(extras)
            except json.JSONDecodeError:
                extra_map = None
            if not isinstance(extra_map, dict):
                return _error(400, CODE_MALFORMED,
                              "extras must be a JSON object")
            metadata.update(extra_map)
        vector, failure = await _embed_upload(image)
        if failure is not None:
            return failure
        try:
            gallery.enroll(EnrollmentRecord(cattle_id=cattle_id,
                                            embedding=vector,
                                            metadata=metadata))
        except DuplicateId as e:
            return _error(409, CODE_DUPLICATE_ID, str(e))
        return {"cattle_id": cattle_id, "dim": gallery.dim}

    @app.post("/api/v1/cattle/verify")
    async def verify(image: UploadFile = File(None),
                     cattle_id: str = Form(None)):
        if not cattle_id:
            return _error(400, CODE_MALFORMED, "cattle_id field required")
        vector, failure = await _embed_upload(image)
        if failure is not None:
            return failure
        try:
            out = gallery.verify(vector, cattle_id)
        except NotEnrolled as e:
            return _error(404, CODE_NOT_ENROLLED, str(e))
        return {"match": out.match, "distance": out.distance,
                "threshold": out.threshold}

    @app.post("/api/v1/cattle/identify")
    async def identify(image: UploadFile = File(None),
                       k: str = Form("5")):
        try:
            top_k = int(k)
        except (TypeError, ValueError):
            return _error(400, CODE_MALFORMED, f"k must be an integer, "
                                               f"got {k!r}")
        if top_k < 1:
            return _error(400, CODE_MALFORMED, "k must be at least 1")
        vector, failure = await _embed_upload(image)
        if failure is not None:
            return failure
        try:
            out = gallery.identify(vector, k=top_k)
        except EmptyGallery as e:
            return _error(409, CODE_EMPTY_GALLERY, str(e))
        return {"candidates": [{"id": c.cattle_id, "distance": c.distance}
                               for c in out.candidates],
                "match": out.match}

    @app.get("/api/v1/cattle")
    async def herd():
        return {"cattle": [_record_json(r) for r in gallery.records],
                "count": len(gallery)}

    @app.get("/api/v1/cattle/{cattle_id}")
    async def get_cattle(cattle_id: str):
        try:
            record = gallery.get(cattle_id)
        except NotEnrolled as e:
            return _error(404, CODE_NOT_ENROLLED, str(e))
        return _record_json(record)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "gallery_size": len(gallery),
                "dim": gallery.dim}

    return app


def run_server(checkpoint, detector_checkpoint, gallery_path, port=8000,
               threshold_override=None, host="127.0.0.1"):
    import uvicorn

    rt = load_runtime(checkpoint, detector_checkpoint, gallery_path,
                      threshold_override=threshold_override)
    app = create_app(rt.embed_net, rt.detect_net, rt.gallery,
                     preprocess_params=rt.preprocess_params)
    uvicorn.run(app, host=host, port=port, log_level="warning")
