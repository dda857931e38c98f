"""Continual neural signed-distance mapping with sequential convex trajectory optimisation."""

import importlib

__version__ = "0.1.0"

# loaded on first access so the CLI can pin BLAS threads before numpy starts
_EXPORTS = {
    "EpisodeConfig": "bench", "compute_metrics": "bench", "export_artifacts": "bench",
    "run_baseline": "bench", "run_episode": "bench",
    "GlobalSdfMap": "mapper", "Mapper": "mapper", "MapperConfig": "mapper",
    "AnalyticMap": "planner", "OcpSpec": "planner", "mpc_step": "planner", "scp_solve": "planner",
    "load_world": "world",
}
__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
