"""High-level pipeline operations behind the service endpoints.

Each function maps one request model to core-library calls and returns the
matching response model. Everything is deterministic for a fixed request.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import inference as inf
from . import metrics as mx
from . import simworld as sw
from . import training as tr
from .model import LatentSpec, ModelConfig, load_checkpoint
from .service.schemas import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    SynthRequest,
    SynthResponse,
    TrainRequest,
    TrainResponse,
)


def scenario_from(params, task: str | None = None) -> sw.ScenarioConfig:
    return sw.ScenarioConfig(
        task=task or params.task,
        joints=params.joints,
        dt=params.dt,
        duration_ticks=params.duration_ticks,
        noise_scale=params.noise_scale,
    )


def synth(req: SynthRequest) -> SynthResponse:
    scenario = scenario_from(req.scenario)
    grid = sw.label_grid(req.levels, req.seeds)
    demos = []
    histogram: dict[str, dict[str, int]] = {name: {} for name in req.levels}
    for i, (labels, grid_seed) in enumerate(grid):
        demo_seed = req.seed * 1_000_003 + grid_seed * 1_000 + i
        demos.append(sw.synthesize_demo(scenario, labels, demo_seed))
        for name, y in labels.items():
            key = f"{y:g}"
            histogram[name][key] = histogram[name].get(key, 0) + 1
    bundle = ds.build_bundle(
        demos,
        width=req.dataset.window,
        hop=req.dataset.hop,
        stride=req.dataset.stride,
        train_fraction=req.dataset.train_fraction,
        seed=req.seed,
    )
    ds.save(bundle, req.out_path)
    digest = hashlib.sha256(Path(req.out_path).read_bytes()).hexdigest()
    return SynthResponse(
        demos=len(demos),
        windows=len(bundle.windows),
        label_histogram=histogram,
        out_path=req.out_path,
        sha256=digest,
    )


def train(req: TrainRequest) -> TrainResponse:
    bundle = ds.load(req.dataset_path)
    model_config = ModelConfig(
        state_dim=bundle.state_dim,
        window=req.model.window,
        hidden_dim=req.model.hidden_dim,
        encoder_layers=req.model.encoder_layers,
        decoder_layers=req.model.decoder_layers,
        latent=LatentSpec(len(req.model.constrained), req.model.unconstrained, tuple(req.model.constrained)),
        predictor_input=req.model.predictor_input,
    )
    train_config = tr.TrainConfig(
        epochs=req.train.epochs,
        batch_size=req.train.batch_size,
        seed=req.train.seed,
        eval_every=req.train.eval_every,
        learning_rate=req.train.learning_rate,
        clip_norm=req.train.clip_norm,
        weights=tr.LossWeights(req.train.alpha, req.train.beta, req.train.gamma),
        strict_sequence_mse=req.train.strict_sequence_mse,
    )
    try:
        result = tr.train(
            bundle, model_config, train_config,
            checkpoint_path=req.out_path, history_path=req.history_path,
        )
    except tr.TrainingDiverged as err:
        tr.write_divergence_snapshot(f"{req.out_path}.diverged.json", err)
        raise
    perr = None
    if model_config.latent.constrained:
        val = tr._prepare(bundle, model_config.latent.directive_names, "val")
        if val[0] is not None:
            perr = tr.predictor_error(result.model, val[0], val[1])
    final_train = [row for row in result.history if row["split"] == "train"][-1]
    return TrainResponse(
        epochs=train_config.epochs,
        final={k: float(v) if isinstance(v, (int, float, np.floating)) else v for k, v in final_train.items()},
        fingerprint=result.fingerprint,
        out_path=req.out_path,
        history_path=req.history_path,
        predictor_error=perr,
        wall_seconds=result.wall_seconds,
    )


def reference_for(req: EvalRequest, scenario: sw.ScenarioConfig, directive: str):
    if req.reference == "paper":
        key = f"{scenario.task}.{directive}"
        lines = req.reference_lines or {}
        if key not in lines:
            raise ValueError(f"reference = paper but no reference_lines entry for {key!r}")
        slope, intercept = lines[key]
        return mx.ReferenceLine(slope, intercept).require_usable(), []
    return mx.synthesize_reference(
        scenario, directive, trials_per_level=req.trials_per_level, seed=req.seed
    )


def evaluate(req: EvalRequest) -> EvalResponse:
    model, normalization, meta = load_checkpoint(req.checkpoint_path)
    if normalization is None:
        raise ValueError(f"{req.checkpoint_path}: checkpoint has no normalization stats")
    scenario = sw.ScenarioConfig(task=req.task, noise_scale=0.0)
    spec = model.config.latent
    directives = req.directives or list(spec.directive_names)
    engine = inf.EngineConfig(ticks=req.ticks, seed=req.seed)

    reports: list[mx.MdeReport] = []
    outcomes: list[tuple[bool, str | None]] = []
    for directive in directives:
        reference, ref_points = reference_for(req, scenario, directive)
        if req.all_dims:
            dims = list(range(spec.total))
        else:
            dims = [spec.dim_of(directive)]
        for dim in dims:
            report = mx.run_mde_protocol(
                model,
                normalization,
                scenario,
                directive,
                dim,
                reference,
                reference_points=ref_points,
                command_values=tuple(req.command_values),
                engine=engine,
                probe=dim < spec.constrained,
            )
            reports.append(report)
            outcomes.extend(report.tsr.outcomes)

    total = mx.tsr(outcomes)
    files = []
    if req.out_dir:
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "mde_reports.json"
        mx.write_reports(
            path, reports,
            extra={"tsr": {"successes": total.successes, "total": total.total, "text": str(total)}},
        )
        files.append(str(path))
        csv_path = out_dir / "mde_reports.csv"
        with open(csv_path, "w") as fh:
            fh.write("directive,latent_dim,mde,ref_slope,ref_intercept,gen_slope,gen_intercept,x_flipped,tsr\n")
            for r in reports:
                fh.write(
                    f"{r.directive},{r.latent_dim},{r.mde:.6g},{r.reference.slope:.6g},"
                    f"{r.reference.intercept:.6g},{r.generated[0]:.6g},{r.generated[1]:.6g},"
                    f"{r.x_flipped},{str(r.tsr).replace(',', ';')}\n"
                )
        files.append(str(csv_path))
    return EvalResponse(
        reports=[r.to_dict() for r in reports],
        tsr={"successes": total.successes, "total": total.total, "text": str(total)},
        files=files,
    )


def ablate(req: AblateRequest) -> AblateResponse:
    model, normalization, _ = load_checkpoint(req.checkpoint_path)
    if normalization is None:
        raise ValueError(f"{req.checkpoint_path}: checkpoint has no normalization stats")
    scenario = sw.ScenarioConfig(task=req.task, noise_scale=0.0)
    schemes = [
        inf.WeightScheme(kind, req.exponential_m) if kind == "exponential" else inf.WeightScheme(kind)
        for kind in req.schemes
    ]
    switch_dim = model.config.latent.dim_of(req.switch_directive)
    rows = mx.weight_ablation(
        model,
        normalization,
        scenario,
        schemes,
        seeds=req.seeds,
        switch_tick=req.switch_tick,
        switch_dim=switch_dim,
        switch_value=req.switch_value,
        engine=inf.EngineConfig(ticks=req.ticks, follower_noise=req.follower_noise),
    )
    out_rows = [
        {
            "scheme": row["scheme"],
            "tsr": str(row["tsr"]),
            "successes": row["tsr"].successes,
            "trials": row["tsr"].total,
            "mean_jerk": row["mean_jerk"],
            "jerk_per_seed": row["jerk_per_seed"],
        }
        for row in rows
    ]
    if req.out_path:
        import json

        with open(req.out_path, "w") as fh:
            json.dump({"rows": out_rows}, fh, indent=2, sort_keys=True)
    return AblateResponse(rows=out_rows, out_path=req.out_path)
