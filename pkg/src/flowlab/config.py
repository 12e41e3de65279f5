"""Run configuration: a TOML file with a documented key tree.

Layout::

    experiment = "decomposition_convergence"
    reduction = "fixed-order"          # or "parallel"

    [pair.base]                        # or [model] for single-model runs
    name = "ou"
    rate = 1.0
    [pair.perturbed]
    name = "ou"
    sigma = 0.5

    [mesh]                             # fine step h, estimator mesh H or H_list
    h = 0.0078125
    H_list = [0.125, 0.0625]

    [mc]                               # paths and master seed (required)
    M = 512
    seed = 1

    [params]                           # experiment-specific keys (x, s, t, ...)
    [tolerances]                       # overrides of default tolerances
    [output]
    dir = "out"
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field

import tomli_w

from .experiments import EXPERIMENTS
from .model import CATALOG

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REDUCTIONS = ("fixed-order", "parallel")
_TOP_KEYS = {"experiment", "reduction", "model", "pair", "mesh", "mc", "params", "tolerances", "output"}


class ConfigError(ValueError):
    """Validation failure; ``problems`` lists ``(field path, message)`` pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.problems))


@dataclass
class RunConfig:
    experiment: str | None = None
    model: dict | None = None
    pair: dict | None = None
    mesh: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    reduction: str = "fixed-order"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError([(k, "unknown key") for k in sorted(unknown)])
        cfg = cls(
            experiment=data.get("experiment"),
            model=data.get("model"),
            pair=data.get("pair"),
            mesh=dict(data.get("mesh", {})),
            mc=dict(data.get("mc", {})),
            params=dict(data.get("params", {})),
            tolerances=dict(data.get("tolerances", {})),
            output=dict(data.get("output", {})),
            reduction=data.get("reduction", "fixed-order"),
        )
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([("<file>", f"TOML syntax error: {exc}")]) from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            text = fh.read().decode()
        return cls.loads(text)

    def to_dict(self) -> dict:
        """Serializable dictionary; ``None`` entries are dropped (TOML has no null)."""
        return _drop_none(asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def validate(self, require_experiment: bool = True) -> "RunConfig":
        """Check invariants; raise :class:`ConfigError` listing every problem."""
        problems = []
        if require_experiment:
            if self.experiment is None:
                problems.append(("experiment", "missing"))
            elif self.experiment not in EXPERIMENTS:
                problems.append(("experiment", f"unknown experiment {self.experiment!r}"))
        if self.reduction not in REDUCTIONS:
            problems.append(("reduction", f"must be one of {REDUCTIONS}"))
        if self.model is not None:
            problems += _check_model(self.model, "model")
        if self.pair is not None:
            for role in ("base", "perturbed"):
                if role not in self.pair:
                    problems.append((f"pair.{role}", "missing"))
                else:
                    problems += _check_model(self.pair[role], f"pair.{role}")
        seed = self.mc.get("seed")
        if seed is None:
            problems.append(("mc.seed", "missing (a master seed is mandatory)"))
        elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            problems.append(("mc.seed", "must be a non-negative integer"))
        for key in ("M", "M_lhs", "M_out", "M_in"):
            if key in self.mc:
                v = self.mc[key]
                if not isinstance(v, int) or isinstance(v, bool) or v < 2:
                    problems.append((f"mc.{key}", "must be an integer >= 2"))
        if "threads" in self.mc:
            v = self.mc["threads"]
            if not isinstance(v, int) or v < 1:
                problems.append(("mc.threads", "must be an integer >= 1"))
        problems += _check_mesh(self.mesh)
        if problems:
            raise ConfigError(problems)
        return self

    def with_overrides(self, seed=None, out=None, threads=None) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        if seed is not None:
            cfg.mc["seed"] = int(seed)
        if out is not None:
            cfg.output["dir"] = str(out)
        if threads is not None:
            cfg.mc["threads"] = int(threads)
        return cfg

    @property
    def output_dir(self) -> str:
        return self.output.get("dir", "flowlab_out")

    def experiment_args(self) -> dict:
        """Flat dictionary consumed by the ``run_*`` functions."""
        args = dict(self.params)
        args.update(self.mesh)
        args.update(self.mc)
        args["tolerances"] = dict(self.tolerances)
        if self.model is not None:
            args["model"] = dict(self.model)
        if self.pair is not None:
            args["pair"] = {k: dict(v) for k, v in self.pair.items()}
        if self.reduction == "fixed-order" and "threads" not in args:
            args["threads"] = None
        return args


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def _check_model(spec, path):
    if not isinstance(spec, dict) or "name" not in spec:
        return [(f"{path}.name", "missing")]
    name = spec["name"]
    if name not in CATALOG or name == "frozen_drift":
        return [(f"{path}.name", f"unknown model {name!r}")]
    allowed = set(CATALOG[name][1])
    return [(f"{path}.{k}", f"unknown parameter for {name}") for k in sorted(set(spec) - allowed - {"name"})]


def _multiple(H, h):
    q = H / h
    return q >= 1 - 1e-12 and abs(q - round(q)) <= 1e-9 * max(q, 1.0)


def _check_mesh(mesh):
    problems = []
    h = mesh.get("h")
    if h is not None and not (isinstance(h, (int, float)) and h > 0):
        return [("mesh.h", "must be positive")]
    if "H" in mesh:
        H = mesh["H"]
        if not isinstance(H, (int, float)) or H <= 0:
            problems.append(("mesh.H", "must be positive"))
        elif h is not None and not _multiple(H, h):
            problems.append(("mesh.H", f"H={H} is not an integer multiple of h={h}"))
    for i, H in enumerate(mesh.get("H_list", [])):
        if not isinstance(H, (int, float)) or H <= 0:
            problems.append((f"mesh.H_list[{i}]", "must be positive"))
        elif h is not None and "fine_factor" not in mesh and not _multiple(H, h):
            problems.append((f"mesh.H_list[{i}]", f"H={H} is not an integer multiple of h={h}"))
    ff = mesh.get("fine_factor")
    if ff is not None and (not isinstance(ff, int) or ff < 1):
        problems.append(("mesh.fine_factor", "must be a positive integer"))
    if "H_list" in mesh and "h" in mesh and ff is not None:
        problems.append(("mesh.h", "give either h or fine_factor with H_list, not both"))
    return problems
