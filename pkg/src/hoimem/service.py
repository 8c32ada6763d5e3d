"""HTTP service wrapping the pipeline: one endpoint per pipeline operation.

Paths in requests refer to the filesystem the service runs on.  Invalid
inputs map to 422, unexpected failures to 500; both carry a ``detail``
message.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from hoimem import __version__, pipeline
from hoimem.config import RunConfig, resolve_config
from hoimem.errors import InputError


class PromptsRequest(BaseModel):
    taxonomy: str


class PromptsResponse(BaseModel):
    prompts: list[str]


class SynthRequest(BaseModel):
    out_dir: str
    profile: str | None = None
    spec: str | None = None
    seed: int | None = None


class SynthResponse(BaseModel):
    paths: dict[str, str]
    profile: str
    seed: int
    hoi_classes: int
    train_images: int
    test_images: int
    feature_records: int
    frequencies: list[int]


class ConfigOptions(BaseModel):
    """Flags shared by compute endpoints; everything optional on top of defaults."""

    config: str | None = None
    seed: int | None = None
    threads: int | None = None
    shots: int | None = None
    gammas: tuple[float, float, float] | None = None

    def resolve(self) -> RunConfig:
        overrides = {}
        if self.seed is not None:
            overrides["seed"] = self.seed
        if self.threads is not None:
            overrides["threads"] = self.threads
        if self.shots is not None:
            overrides["memory_shots"] = self.shots
        if self.gammas is not None:
            overrides["gamma_ic"] = self.gammas[0]
            overrides["gamma_ia"] = self.gammas[1]
            overrides["gamma_t"] = self.gammas[2]
        return resolve_config(self.config, **overrides)


class BuildMemoryRequest(ConfigOptions):
    annotations: str
    features: str
    out: str
    heldout: list[int] | None = None
    heldout_frac: float | None = None


class BuildMemoryResponse(BaseModel):
    memory: str
    rows: int
    verbs: int
    shots: int
    heldout_classes: list[int]


class InferRequest(ConfigOptions):
    annotations: str
    features: str
    memory: str
    out: str
    checkpoint: str | None = None
    images: str | None = None
    lambda_: float | None = Field(default=None, alias="lambda")

    model_config = {"populate_by_name": True}


class InferResponse(BaseModel):
    predictions: str
    triplets: int
    lambda_: float = Field(alias="lambda")
    mode: str

    model_config = {"populate_by_name": True}


class EvalRequest(ConfigOptions):
    annotations: str
    predictions: str
    out: str


class EvalResponse(BaseModel):
    map_full: float | None
    map_rare: float | None
    map_nonrare: float | None
    map_seen: float | None
    map_unseen: float | None
    report_json: str
    report_csv: str


class FinetuneRequest(ConfigOptions):
    annotations: str
    features: str
    memory: str
    out: str
    images: str | None = None


class FinetuneResponse(BaseModel):
    checkpoint: str
    epochs: int
    loss_history: list[float]
    trainable_values: int


class GradcheckRequest(ConfigOptions):
    eps: float = 1e-5
    max_images: int = 1


class GradcheckResponse(BaseModel):
    max_relative_error: float
    parameters_checked: int
    images: int
    passed: bool


class SweepRequest(ConfigOptions):
    axis: str
    values: list
    out: str
    profile: str | None = None
    seeds: int = 1
    annotations: str | None = None
    test_annotations: str | None = None
    features: str | None = None


class SweepRow(BaseModel):
    setting: str
    map_full: float | None
    map_rare: float | None
    map_nonrare: float | None


class SweepResponse(BaseModel):
    axis: str
    rows: list[SweepRow]
    csv: str


def create_app() -> FastAPI:
    app = FastAPI(title="hoimem", version=__version__)

    @app.exception_handler(InputError)
    async def handle_input_error(request: Request, exc: InputError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(Exception)
    async def handle_runtime_error(request: Request, exc: Exception):
        return JSONResponse(status_code=500,
                            content={"detail": f"{type(exc).__name__}: {exc}"})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/prompts", response_model=PromptsResponse)
    def prompts(req: PromptsRequest):
        return PromptsResponse(prompts=pipeline.run_prompts(req.taxonomy))

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest):
        return SynthResponse(**pipeline.run_synth(
            out_dir=req.out_dir, profile=req.profile, spec_path=req.spec, seed=req.seed))

    @app.post("/memory/build", response_model=BuildMemoryResponse)
    def build_memory(req: BuildMemoryRequest):
        return BuildMemoryResponse(**pipeline.run_build_memory(
            req.annotations, req.features, req.out, req.resolve(),
            heldout_list=req.heldout, heldout_frac=req.heldout_frac))

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        return InferResponse(**pipeline.run_infer(
            req.annotations, req.features, req.memory, req.out, req.resolve(),
            checkpoint_path=req.checkpoint, images_path=req.images, lam=req.lambda_))

    @app.post("/evaluate", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        return EvalResponse(**pipeline.run_eval(
            req.annotations, req.predictions, req.out, req.resolve()))

    @app.post("/finetune", response_model=FinetuneResponse)
    def finetune(req: FinetuneRequest):
        return FinetuneResponse(**pipeline.run_finetune(
            req.annotations, req.features, req.memory, req.out, req.resolve(),
            images_path=req.images))

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return GradcheckResponse(**pipeline.run_gradcheck(
            req.resolve(), eps=req.eps, max_images=req.max_images))

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest):
        return SweepResponse(**pipeline.run_sweep(
            req.axis, req.values, req.out, req.resolve(), profile=req.profile,
            seeds=req.seeds, annotations_path=req.annotations,
            test_annotations_path=req.test_annotations, features_path=req.features))

    return app


app = create_app()
