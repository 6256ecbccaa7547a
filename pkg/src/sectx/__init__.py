"""Information-flow-secure scheduling of distributed transactions."""

from .lattice import ConflictLabel, Label, flows_to, join, meet
from .scenarios import Scenario, load_scenario

__all__ = ["ConflictLabel", "Label", "Scenario", "flows_to", "join", "load_scenario", "meet"]
