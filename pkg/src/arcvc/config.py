"""Run configuration: a sectioned key-value file plus per-key command-line overrides.

Example file::

    [experiment]
    seeds = 0-4
    [risk]
    kind = abs
    d = 0.1
    lam = 10
    [trainer]
    episodes = 300

Every key can be overridden on the command line as ``--section.key VALUE``.
Validation happens here, before any simulation starts.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .environments import GamblersRuinConfig, GridWorldConfig
from .nn import ConfigurationError
from .risk import RiskSpec, make_risk_function, scale_constraint
from .trainer import ArcvcConfig, ReferenceMethod

EXPERIMENTS = ("risk_comparison", "reference_study", "penalty_study", "shaping")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str):
    t = str(text).strip().lower()
    return None if t in ("", "none") else int(t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in str(text).replace(" ", "").split(",") if v)


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"0,2,5-7"`` -> ``(0, 2, 5, 6, 7)``."""
    out: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(out)


# section -> key -> (parser, desk default as text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "seeds": (parse_int_list, "0-4"),
        "workers": (int, "1"),
        "layout": (str, "per_seed"),
        "checkpoint": (_bool, "false"),
    },
    "grid": {
        "width": (int, "20"),
        "height": (int, "25"),
        "p_mine": (float, "0.2"),
        "p_noise": (float, "0.1"),
        "r_mine": (float, "-1"),
        "r_target": (float, "1"),
        "max_steps": (int, "500"),
        "layout_seed": (int, "0"),
        "local_mines": (_bool, "true"),
    },
    "risk": {
        "kind": (str, "abs"),
        "d": (float, "0.1"),
        "lam": (float, "10"),
        "b": (float, "1"),
        "c": (float, "0"),
        "clamp": (float, "1000"),
    },
    "reference": {
        "kind": (str, "state_value"),
        "nu0": (float, "0"),
        "step_size": (float, "1"),
        "decay": (float, "1"),
        "target": (str, "return"),
    },
    "trainer": {
        "penalty": (str, "risk_network"),
        "gamma": (float, "0.9"),
        "tau": (_optional_int, "none"),
        "batch_size": (int, "100"),
        "episodes": (int, "1000"),
        "episodes_per_update": (int, "1"),
        "lr_actor": (float, "0.001"),
        "lr_value": (float, "0.001"),
        "lr_risk": (float, "0.001"),
        "hidden": (int, "64"),
        "grad_clip": (float, "10"),
        "critic_steps": (int, "1"),
        "value_mode": (str, "mc"),
        "target_refresh": (int, "100"),
        "grad_j": (str, "likelihood"),
        "segments": (str, "all"),
        "replay_capacity": (int, "10000"),
        "updates": (str, "minibatch"),
        "checkpoint_every": (int, "0"),
    },
    "risk_comparison": {
        "kinds": (_words, "var,abs,sqrt"),
        "window": (int, "100"),
    },
    "reference_study": {
        "gammas": (_floats, "0.1,0.3,0.5,0.7,0.9,0.99"),
        "repeats": (int, "3"),
        "n_states": (int, "20"),
        "n_episodes": (int, "20"),
        "stationary_steps": (int, "100000"),
        "eval_max_steps": (int, "500"),
    },
    "penalty_study": {
        "arms": (_words, "sample_based,risk_network"),
        "control": (_bool, "false"),
        "window": (int, "100"),
    },
    "shaping": {
        "k": (int, "10"),
        "horizon": (int, "100"),
        "gamma": (float, "1"),
        "fortunes": (parse_int_list, "1-25"),
        "n_per_state": (int, "200"),
        "n_value_episodes": (int, "1000"),
        "target": (str, "exact"),
        "synthetic": (_bool, "false"),
        "planted_b": (float, "2"),
        "planted_c": (float, "-1"),
        "noise": (float, "0"),
    },
}

# sweep sizes of the full-size study; desk defaults above are about a tenth of these
FULL_SCALE = {
    ("experiment", "seeds"): "0-49",
    ("reference_study", "repeats"): "30",
}
FULL_SCALE_GAMMAS = 50


@dataclass
class ExperimentConfig:
    kind: str
    values: dict[str, dict] = field(default_factory=dict)
    out: Path = Path("results")
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["experiment"]["seeds"]

    @property
    def workers(self) -> int:
        return self.values["experiment"]["workers"]

    def grid_config(self, seed: int) -> GridWorldConfig:
        g = dict(self.values["grid"])
        if self.values["experiment"]["layout"] == "per_seed":
            g["layout_seed"] = seed
        return GridWorldConfig(**g)

    def risk_spec(self, kind: str | None = None, lam: float | None = None) -> RiskSpec:
        r = self.values["risk"]
        kind = r["kind"] if kind is None else kind
        f = make_risk_function(kind, b=r["b"], c=r["c"], clamp=r["clamp"])
        # D is given on the one-sided-abs scale; shaped risks take it as is
        D = r["d"] if f.kind == "shaped" else scale_constraint(r["d"], kind)
        return RiskSpec(f, D, r["lam"] if lam is None else lam)

    def arcvc_config(self, seed: int, **overrides) -> ArcvcConfig:
        t = dict(self.values["trainer"])
        t.update(overrides)
        risk = t.pop("risk", None) or self.risk_spec()
        ref = ReferenceMethod(**self.values["reference"])
        return ArcvcConfig(risk=risk, reference=ref, seed=seed, max_steps=None, **t)

    def ruin_config(self) -> GamblersRuinConfig:
        s = self.values["shaping"]
        return GamblersRuinConfig(initial_fortune=1, k=s["k"], horizon=s["horizon"], gamma=s["gamma"])

    def as_text(self) -> str:
        """Resolved configuration in file form (written next to the results)."""
        cp = configparser.ConfigParser()
        for section, keys in self.raw.items():
            cp[section] = dict(keys)
        buf = io.StringIO()
        cp.write(buf)
        return f"# experiment: {self.kind}\n" + buf.getvalue()


def _full_scale_gammas() -> str:
    step = 0.98 / (FULL_SCALE_GAMMAS - 1)
    return ",".join(repr(round(0.01 + i * step, 10)) for i in range(FULL_SCALE_GAMMAS))


def load_config(kind: str, path=None, overrides: dict[str, str] | None = None,
                full_scale: bool = False, out=None) -> ExperimentConfig:
    """Merge defaults, an optional file and ``section.key`` overrides, then validate."""
    kind = kind.replace("-", "_")
    if kind not in EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {kind!r}")
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if full_scale:
        for (s, k), v in FULL_SCALE.items():
            raw[s][k] = v
        raw["reference_study"]["gammas"] = _full_scale_gammas()
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, value in cp[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                raw[section][key] = value
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigurationError(f"unknown override {dotted}")
        raw[section][key] = value

    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                raise ConfigurationError(f"{section}.{key}: {exc}") from exc
    cfg = ExperimentConfig(kind, values, Path(out) if out is not None else Path("results"), raw)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Reject unusable settings before anything runs."""
    v = cfg.values
    if not cfg.seeds:
        raise ConfigurationError("seed list is empty")
    if cfg.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if v["experiment"]["layout"] not in ("per_seed", "fixed"):
        raise ConfigurationError("experiment.layout must be per_seed or fixed")
    if v["risk"]["lam"] <= 0:
        raise ConfigurationError("risk.lam must be > 0 (the unpenalised control arm is built internally)")
    if not v["risk"]["d"] > 0:
        raise ConfigurationError("risk.d must be > 0")
    for p in ("p_mine", "p_noise"):
        if not 0.0 <= v["grid"][p] <= 1.0:
            raise ConfigurationError(f"grid.{p} outside [0, 1]")
    if cfg.kind == "reference_study":
        gammas = v["reference_study"]["gammas"]
        if not gammas or any(not 0.0 < g < 1.0 for g in gammas):
            raise ConfigurationError("reference_study.gammas must lie strictly inside (0, 1)")
        for key in ("repeats", "n_states", "n_episodes", "stationary_steps"):
            if v["reference_study"][key] < 1:
                raise ConfigurationError(f"reference_study.{key} must be >= 1")
    if cfg.kind == "risk_comparison":
        for k in v["risk_comparison"]["kinds"]:
            if make_risk_function(k).kind not in ("one_sided_variance", "one_sided_abs", "one_sided_sqrt"):
                raise ConfigurationError(f"risk comparison takes one-sided kinds only, got {k!r}")
    if cfg.kind == "penalty_study":
        arms = v["penalty_study"]["arms"]
        if not arms:
            raise ConfigurationError("penalty_study.arms is empty")
    if cfg.kind == "shaping":
        s = v["shaping"]
        if s["n_per_state"] < 1 or not s["fortunes"]:
            raise ConfigurationError("shaping needs n_per_state >= 1 and a fortune range")
        if s["target"] not in ("exact", "empirical"):
            raise ConfigurationError("shaping.target must be exact or empirical")
        if s["synthetic"] and s["planted_b"] <= 0:
            raise ConfigurationError("shaping.planted_b must be > 0")
        if s["noise"] < 0:
            raise ConfigurationError("shaping.noise must be >= 0")
        cfg.ruin_config()
    else:
        # building the objects runs each module's own validation
        cfg.grid_config(cfg.seeds[0])
        cfg.arcvc_config(cfg.seeds[0])
