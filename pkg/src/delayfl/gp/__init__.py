"""Geometric programming: posynomial algebra, log-space interior point, successive condensation."""

from .barrier import GpInfeasibleError, solve_inner
from .posynomial import Monomial, Posynomial, condense
from .program import CompiledGp, GpProgram

__all__ = ["CompiledGp", "GpInfeasibleError", "GpProgram", "Monomial", "Posynomial", "condense", "solve_inner"]
