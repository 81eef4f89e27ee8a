"""Risk functions f, the penalty g, and the risk configuration bundle."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .nn import ConfigurationError

ONE_SIDED = ("one_sided_variance", "one_sided_abs", "one_sided_sqrt")
ALIASES = {
    "var": "one_sided_variance",
    "var-": "one_sided_variance",
    "abs": "one_sided_abs",
    "abs-": "one_sided_abs",
    "sqrt": "one_sided_sqrt",
    "sqrt-": "one_sided_sqrt",
}


class RiskFunction:
    """Base class for a scalar risk function applied to ``z = B - reference``.

    Subclasses implement ``value`` and ``derivative``.  Anything exposing these
    two methods can be handed to the trainer.
    """

    kind = "custom"

    def value(self, z: float) -> float:
        raise NotImplementedError

    def derivative(self, z: float) -> float:
        raise NotImplementedError

    def __call__(self, z: float) -> float:
        return self.value(z)


@dataclass(frozen=True)
class OneSidedVariance(RiskFunction):
    kind = "one_sided_variance"

    def value(self, z):
        return z * z if z <= 0 else 0.0

    def derivative(self, z):
        return 2.0 * z if z < 0 else 0.0


@dataclass(frozen=True)
class OneSidedAbs(RiskFunction):
    kind = "one_sided_abs"

    def value(self, z):
        return -z if z <= 0 else 0.0

    def derivative(self, z):
        return -1.0 if z < 0 else 0.0


@dataclass(frozen=True)
class OneSidedSqrt(RiskFunction):
    """``sqrt(|z|)`` on the negative side; the derivative magnitude is capped."""

    clamp: float = 1e3
    kind = "one_sided_sqrt"

    def value(self, z):
        return math.sqrt(-z) if z <= 0 else 0.0

    def derivative(self, z):
        if z >= 0:
            return 0.0
        # d/dz sqrt(-z) = -1 / (2 sqrt(-z)), unbounded as z -> 0-
        return -min(0.5 / math.sqrt(-z), self.clamp)


@dataclass(frozen=True)
class ShapedRisk(RiskFunction):
    """Bump ``1 / (1 + b (z - c)^2)`` fitted from data; not convex."""

    b: float
    c: float = 0.0
    kind = "shaped"

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigurationError(f"shaped risk requires b > 0, got {self.b}")

    def value(self, z):
        d = z - self.c
        return 1.0 / (1.0 + self.b * d * d)

    def derivative(self, z):
        d = z - self.c
        q = 1.0 + self.b * d * d
        return -2.0 * self.b * d / (q * q)


@dataclass(frozen=True)
class ConstantRisk(RiskFunction):
    """f(z) = level for every z. Useful as a degenerate test fixture."""

    level: float = 0.0
    kind = "constant"

    def value(self, z):
        return self.level

    def derivative(self, z):
        return 0.0


def eval_f(f: RiskFunction, z: float) -> float:
    return f.value(z)


def eval_f_prime(f: RiskFunction, z: float) -> float:
    return f.derivative(z)


class SquaredHinge:
    kind = "squared_hinge"

    def value(self, x: float) -> float:
        return max(0.0, x) ** 2

    def derivative(self, x: float) -> float:
        return 2.0 * max(0.0, x)

    __call__ = value


def eval_g(g, x: float) -> tuple[float, float]:
    """Return ``(g(x), g'(x))``."""
    return g.value(x), g.derivative(x)


def make_risk_function(kind: str, **params) -> RiskFunction:
    kind = ALIASES.get(kind.lower(), kind.lower())
    if kind == "one_sided_variance":
        return OneSidedVariance()
    if kind == "one_sided_abs":
        return OneSidedAbs()
    if kind == "one_sided_sqrt":
        return OneSidedSqrt(clamp=float(params.get("clamp", 1e3)))
    if kind == "shaped":
        return ShapedRisk(float(params["b"]), float(params.get("c", 0.0)))
    if kind == "constant":
        return ConstantRisk(float(params.get("level", 0.0)))
    raise ConfigurationError(f"unknown risk function kind {kind!r}")


def scale_constraint(d_abs: float, kind: str) -> float:
    """Map a constraint level given on the one-sided-abs scale to ``kind``'s scale."""
    if d_abs < 0:
        raise ConfigurationError("constraint level must be nonnegative")
    kind = ALIASES.get(kind.lower(), kind.lower())
    if kind == "one_sided_abs":
        return d_abs
    if kind == "one_sided_sqrt":
        return math.sqrt(d_abs)
    if kind == "one_sided_variance":
        return d_abs * d_abs
    raise ConfigurationError(f"no constraint scaling rule for risk kind {kind!r}")


@dataclass(frozen=True)
class RiskSpec:
    f: RiskFunction
    D: float
    lam: float
    g: SquaredHinge = SquaredHinge()

    def __post_init__(self):
        # lam == 0 is allowed as the unconstrained control arm
        if not self.lam >= 0:
            raise ConfigurationError(f"penalty coefficient must be >= 0, got {self.lam}")
        if not math.isfinite(self.D):
            raise ConfigurationError("constraint level must be finite")
