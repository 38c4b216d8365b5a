"""Experiment orchestration: runs, sweeps, and feature dumps.

A run replays a scenario stream once per seed through the selected method's
step function, honours gallery-rebuild signals, and emits one metrics record
per batch. Output per run: `metrics.csv`, `summary.json` (per-phase mean and
std across seeds), the scenario file used (for exact replay), and the final
adapted checkpoint of the last seed.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import TempConfig, build_gallery
from .baselines import BaselineOptions, build_method
from .extractor import ClassifierHead, ParameterSet, extract_features, load_checkpoint, save_checkpoint
from .metrics import (
    MetricsRecord,
    cmc_top1,
    summarize,
    write_records_csv,
    write_summary_json,
)
from .scenario import (
    GalleryEvent,
    QueryBatch,
    ScenarioSpec,
    SyntheticWorld,
    build_stream,
    generate_world,
    save_scenario,
)

SWEEP_AXES = {
    "k": (1, 10, 50, 100),
    "batch-size": (64, 32, 16, 8, 2, 1),
    "lambda": (0.0, 1e-4, 1e-3),
    "selection": ("top-k", "bottom-k", "top-bottom", "random"),
}


@dataclass(frozen=True)
class RunConfig:
    method: str
    scenario: ScenarioSpec
    temp: TempConfig = TempConfig()
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str | Path | None = None
    run_id: str | None = None
    options: BaselineOptions = BaselineOptions()
    gallery_with_source_params: bool = False  # rebuild galleries with theta0 instead

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.method}-{self.scenario.kind}"


@dataclass
class RunResult:
    records: list[MetricsRecord]
    summary: dict
    paths: dict[str, Path] = field(default_factory=dict)
    final_params: ParameterSet | None = None


def _effective_scenario(config: RunConfig) -> ScenarioSpec:
    # The method config owns the batch size; the scenario file's value is a
    # default that an explicit --batch-size overrides.
    if config.scenario.batch_size == config.temp.batch_size:
        return config.scenario
    return dataclasses.replace(config.scenario, batch_size=config.temp.batch_size)


def run_single_seed(
    config: RunConfig,
    params: ParameterSet,
    head: ClassifierHead | None,
    world: SyntheticWorld,
    seed: int,
) -> tuple[list[MetricsRecord], ParameterSet]:
    """One pass of one seed's stream through the method; returns the per-batch
    records and the runner's (possibly adapted) parameters."""
    scenario = _effective_scenario(config)
    runner = build_method(config.method, params, config.temp, seed, head, config.options)
    stream = build_stream(scenario, world, seed)
    records: list[MetricsRecord] = []
    iteration = 0
    for event in stream.events():
        if isinstance(event, GalleryEvent):
            gal_params = (
                runner.state.params.source_copy()
                if config.gallery_with_source_params
                else runner.state.params
            )
            runner.set_gallery(build_gallery(gal_params, event.images, event.labels))
            continue
        assert isinstance(event, QueryBatch)
        t0 = time.perf_counter()
        ranking, info = runner.step(event.images)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        gallery = runner.state.gallery
        records.append(
            MetricsRecord(
                run_id=config.resolved_run_id,
                method=runner.name,
                seed=seed,
                phase=event.phase,
                iteration=iteration,
                batch_size=len(event.labels),
                cmc_top1=cmc_top1(ranking[:, 0], gallery.labels, event.labels),
                mean_reid_entropy=info["mean_reid_entropy"],
                loss=info["loss"],
                param_drift_l2=info["param_drift_l2"],
                wallclock_ms_per_image=elapsed_ms / len(event.labels),
                strength=stream.phases[event.phase].strength,
            )
        )
        iteration += 1
    return records, runner.state.params


def run_experiment(
    config: RunConfig,
    params: ParameterSet | None = None,
    head: ClassifierHead | None = None,
    checkpoint_path: str | Path | None = None,
) -> RunResult:
    """Run the configured method over every seed and write the output files
    (when `out_dir` is set)."""
    if params is None:
        if checkpoint_path is None:
            raise ValueError("either a parameter set or a checkpoint path is required")
        params, head = load_checkpoint(checkpoint_path)
    if params.config.input_kind != config.scenario.world.input_kind:
        raise ValueError(
            f"extractor expects {params.config.input_kind} but the scenario world "
            f"produces {config.scenario.world.input_kind}"
        )

    scenario = _effective_scenario(config)
    world = generate_world(scenario.world)
    records: list[MetricsRecord] = []
    final_params = None
    for seed in config.seeds:
        seed_records, final_params = run_single_seed(config, params, head, world, seed)
        records.extend(seed_records)

    phase_labels = [p.label for p in build_stream(scenario, world, config.seeds[0]).phases]
    summary = summarize(records, phase_labels)

    paths: dict[str, Path] = {}
    if config.out_dir is not None:
        run_dir = Path(config.out_dir) / config.resolved_run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        paths["metrics"] = run_dir / "metrics.csv"
        paths["summary"] = run_dir / "summary.json"
        paths["scenario"] = run_dir / "scenario.json"
        paths["checkpoint"] = run_dir / "final_checkpoint.bin"
        write_records_csv(paths["metrics"], records)
        write_summary_json(paths["summary"], summary)
        save_scenario(paths["scenario"], scenario)
        save_checkpoint(paths["checkpoint"], final_params, head)
    return RunResult(records=records, summary=summary, paths=paths, final_params=final_params)


def _apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "k":
        temp = dataclasses.replace(config.temp, k=int(value))
    elif axis == "batch-size":
        temp = dataclasses.replace(config.temp, batch_size=int(value))
    elif axis == "lambda":
        temp = dataclasses.replace(config.temp, lam=float(value))
    elif axis == "selection":
        from .adaptation import SelectionStrategy

        temp = dataclasses.replace(config.temp, selection=SelectionStrategy.parse(str(value)))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    return dataclasses.replace(config, temp=temp, run_id=f"{config.resolved_run_id}-{axis}={value}")


def sweep(
    config: RunConfig,
    axis: str,
    values=None,
    params: ParameterSet | None = None,
    head: ClassifierHead | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[list[tuple[str, MetricsRecord]], Path | None]:
    """One run per axis value per seed, combined into a long-format CSV.

    A failing cell (for example bn-adapt at batch size 1, which cannot
    estimate batch statistics) contributes a single row with empty metric
    cells and an error tag; the sweep itself never aborts.
    """
    if params is None:
        if checkpoint_path is None:
            raise ValueError("either a parameter set or a checkpoint path is required")
        params, head = load_checkpoint(checkpoint_path)
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = tuple(values) if values is not None else SWEEP_AXES[axis]

    world = generate_world(config.scenario.world)
    tagged: list[tuple[str, MetricsRecord]] = []
    for value in values:
        cell = _apply_axis(config, axis, value)
        for seed in cell.seeds:
            try:
                rows, _ = run_single_seed(cell, params, head, world, seed)
            except Exception as err:  # record the failure, keep sweeping
                rows = [
                    MetricsRecord(
                        run_id=cell.resolved_run_id,
                        method=cell.method,
                        seed=seed,
                        phase=0,
                        iteration=0,
                        batch_size=int(value) if axis == "batch-size" else cell.temp.batch_size,
                        cmc_top1=None,
                        mean_reid_entropy=None,
                        loss=None,
                        param_drift_l2=None,
                        wallclock_ms_per_image=None,
                        error_tag=f"{type(err).__name__}: {err}"[:120],
                    )
                ]
            tagged.extend((str(value), r) for r in rows)

    out_path = None
    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / f"sweep-{config.method}-{axis}.csv"
        _write_sweep_csv(out_path, axis, tagged)
    return tagged, out_path


def _write_sweep_csv(path: Path, axis: str, tagged) -> None:
    import csv

    from .metrics import CSV_COLUMNS

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("axis", "value") + CSV_COLUMNS)
        for value, record in tagged:
            writer.writerow([axis, value] + record.to_row())


def dump_features(
    params: ParameterSet,
    images: np.ndarray,
    labels: np.ndarray,
    role: str,
    phase: int,
    out_path: str | Path,
    append: bool = False,
) -> None:
    """Write extracted features as CSV rows of (d feature columns, identity,
    role, phase), 9 significant digits, for external embedding or plotting."""
    feats = extract_features(params, images).data
    labels = np.asarray(labels)
    mode = "a" if append else "w"
    with open(out_path, mode, newline="", encoding="utf-8") as fh:
        import csv

        writer = csv.writer(fh)
        if not append:
            writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["identity", "role", "phase"])
        for row, label in zip(feats, labels):
            writer.writerow([format(float(v), ".9g") for v in row] + [int(label), role, phase])
