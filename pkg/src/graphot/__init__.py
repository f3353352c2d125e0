"""Dynamic optimal transport coupled between a rectangular domain and an
embedded star-shaped metric graph."""

__version__ = "0.1.0"

_EXPORTS = {
    "CombinatorialStarGraph": "geometry",
    "EmbeddedStarGraph": "geometry",
    "PenaltyValue": "geometry",
    "edge_normal_sign": "geometry",
    "unsigned_angle": "geometry",
    "penalty_R": "geometry",
    "penalty_R_gradient_check": "geometry",
    "validate_embedding": "geometry",
    "embed_star": "geometry",
    "BulkGrid": "meshes",
    "TimeGrid": "meshes",
    "GraphMesh": "meshes",
    "BoundaryData": "meshes",
    "DiscreteFlow": "meshes",
    "CEOperator": "meshes",
    "assemble_ce": "meshes",
    "ce_residual": "meshes",
    "total_mass": "meshes",
    "deposit_graph_measure": "meshes",
    "Mobility": "mobility",
    "ActionWeights": "mobility",
    "ActionBreakdown": "mobility",
    "psi": "mobility",
    "psi_prox": "mobility",
    "action": "mobility",
    "density_bounds_check": "mobility",
    "SolverConfig": "solver",
    "SolveReport": "solver",
    "solve_fixed_graph": "solver",
    "initial_flow": "solver",
    "holder_diagnostic": "solver",
    "OuterConfig": "outer",
    "GraphIterate": "outer",
    "split_boundary_data": "outer",
    "outer_objective": "outer",
    "optimize_graph": "outer",
    "w2_squared_1d": "oracles",
    "prox_grid_search": "oracles",
    "center_grid_search": "oracles",
    "parse_problem": "problem",
    "Scenario": "problem",
    "write_bundle": "bundle",
    "read_bundle": "bundle",
}

__all__ = ["__version__", *_EXPORTS]


def __getattr__(name):
    # Lazy re-exports keep `import graphot` light for the CLI entry point.
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
