"""Multi-species neutron transport: branching simulation, weighted walks, semigroup and eigen solvers."""
__version__ = "0.1.0"
