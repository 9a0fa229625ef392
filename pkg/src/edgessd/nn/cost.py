"""Analytic parameter and multiply-add counts for convolution layers."""

from dataclasses import dataclass
from fractions import Fraction

from edgessd.nn.layers import ConvSpec


@dataclass(frozen=True)
class CostEstimate:
    params: int
    madds: int

    def __post_init__(self):
        if self.params < 0 or self.madds < 0:
            raise ValueError("costs must be non-negative")

    def __add__(self, other: "CostEstimate") -> "CostEstimate":
        return CostEstimate(self.params + other.params, self.madds + other.madds)


ZERO_COST = CostEstimate(0, 0)


def layer_cost(spec: ConvSpec, feature_size: int) -> CostEstimate:
    """Weights and multiply-adds of one layer producing a ``feature_size``-square map.

    Standard: ``K^2 N M`` params, ``K^2 F^2 N M`` madds. Depthwise: ``K^2 M`` and
    ``K^2 F^2 M``. Pointwise: ``N M`` and ``N M F^2``.
    """
    if feature_size < 1:
        raise ValueError(f"feature size must be positive, got {feature_size}")
    k2, f2 = spec.kernel_size**2, feature_size**2
    m, n = spec.in_channels, spec.out_channels
    if spec.kind == "depthwise":
        return CostEstimate(k2 * m, k2 * f2 * m)
    return CostEstimate(k2 * n * m, k2 * f2 * n * m)


def separable_cost(kernel_size: int, in_channels: int, out_channels: int, feature_size: int) -> CostEstimate:
    """Depthwise + pointwise pair replacing one standard ``kernel_size`` conv."""
    dw = ConvSpec("depthwise", kernel_size, in_channels, in_channels)
    pw = ConvSpec("pointwise", 1, in_channels, out_channels)
    return layer_cost(dw, feature_size) + layer_cost(pw, feature_size)


def standard_cost(kernel_size: int, in_channels: int, out_channels: int, feature_size: int) -> CostEstimate:
    return layer_cost(ConvSpec("standard", kernel_size, in_channels, out_channels), feature_size)


def madds_ratio(kernel_size: int, in_channels: int, out_channels: int, feature_size: int) -> Fraction:
    """Exact separable/standard multiply-add ratio; equals 1/N + 1/K^2."""
    sep = separable_cost(kernel_size, in_channels, out_channels, feature_size)
    std = standard_cost(kernel_size, in_channels, out_channels, feature_size)
    return Fraction(sep.madds, std.madds)


def reduction_factor(kernel_size: int, out_channels: int) -> float:
    """How many times cheaper the separable pair is: 1 / (1/N + 1/K^2)."""
    return float(1 / (Fraction(1, out_channels) + Fraction(1, kernel_size**2)))
