"""Run configuration: YAML in, validated dataclasses out."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .sim import ScenarioConfig, scenario_from_dict
from .trajectory import ProcessNoise
from .voxelmap import VoxelMapConfig


# The odometry loop tightens the map's correspondence gate and rejects thick
# (multi-surface) cells; both stay configurable under ``run.voxel``.
RUN_VOXEL_DEFAULTS = {"match_gate": 0.1, "max_thickness": 0.05}


@dataclass(frozen=True)
class SamplingConfig:
    enabled: bool = True
    threshold: float = 33.0
    k: int = 10
    count_new_only: bool = False
    proxy_threshold: int = 50_000
    normal_max_thickness: float = 0.1
    normal_min_planarity: float = 0.05


@dataclass(frozen=True)
class EstimatorConfig:
    eps: float = 1e-4
    max_iter: int = 5
    point_std: float = 0.05
    rematch_translation: float = 0.1
    rematch_rotation: float = 0.05
    degeneracy_tol: float = 1e-3
    min_matches: int = 6


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs.

    Exactly one of ``scenario`` (simulate on the fly) or ``stream`` (a
    recorded stream file) is set. ``truth`` supplies ground truth for a
    recorded stream; with a scenario the scenario itself is the truth.
    """

    scenario: ScenarioConfig | None = None
    stream: Path | None = None
    truth: ScenarioConfig | None = None
    dt: float = 0.01
    bootstrap_time: float = 0.3
    process_noise: ProcessNoise = field(default_factory=ProcessNoise)
    initial_variances: tuple = (0.01, 0.01, 1.0, 1.0, 10.0)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    voxel: VoxelMapConfig = field(default_factory=lambda: VoxelMapConfig(**RUN_VOXEL_DEFAULTS))
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    r_min: float = 0.5
    r_max: float = 200.0
    queue_limit: int = 10
    out_dir: Path | None = None
    dense_traj: bool = False
    dump_map: bool = False
    figures: bool = True

    def __post_init__(self):
        if (self.scenario is None) == (self.stream is None):
            raise ConfigError("config needs exactly one input: 'scenario' or 'stream'")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.dt > 0.1:
            raise ConfigError("dt may not exceed the 0.1 s interpolation window")
        if len(self.initial_variances) != 5 or min(self.initial_variances) <= 0:
            raise ConfigError("initial_variances needs 5 positive numbers")
        if self.sampling.threshold < 0 or self.sampling.k < 3:
            raise ConfigError("sampling threshold must be >= 0 and k >= 3")
        if self.estimator.max_iter < 1 or self.estimator.eps <= 0 or self.estimator.point_std <= 0:
            raise ConfigError("estimator needs max_iter >= 1, eps > 0, point_std > 0")

    @property
    def ground_truth(self) -> ScenarioConfig | None:
        return self.scenario if self.scenario is not None else self.truth

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _build(cls, data, what):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{what}' must be a mapping")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{what}' section: {exc}") from None


def config_from_dict(data: dict, *, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    scenario = scenario_from_dict(data.pop("scenario")) if "scenario" in data else None
    stream = data.pop("stream", None)
    if stream is not None:
        stream = Path(stream)
        if base_dir is not None and not stream.is_absolute():
            stream = base_dir / stream
    truth = scenario_from_dict(data.pop("truth")) if "truth" in data else None
    run = dict(data.pop("run", None) or {})
    if data:
        raise ConfigError(f"unknown config keys {sorted(data)}")

    kw = {}
    for key in ("dt", "bootstrap_time", "r_min", "r_max", "queue_limit"):
        if key in run:
            kw[key] = float(run.pop(key)) if key != "queue_limit" else int(run.pop(key))
    if "initial_variances" in run:
        kw["initial_variances"] = tuple(float(x) for x in run.pop("initial_variances"))
    kw["process_noise"] = _build(ProcessNoise, run.pop("process_noise", None), "process_noise")
    kw["sampling"] = _build(SamplingConfig, run.pop("sampling", None), "sampling")
    kw["voxel"] = _build(VoxelMapConfig, {**RUN_VOXEL_DEFAULTS, **(run.pop("voxel", None) or {})},
                         "voxel")
    kw["estimator"] = _build(EstimatorConfig, run.pop("estimator", None), "estimator")
    if run:
        raise ConfigError(f"unknown run keys {sorted(run)}")
    return RunConfig(scenario=scenario, stream=stream, truth=truth, **kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)
