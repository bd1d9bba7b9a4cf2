"""CEM-GMsFEM for strain-limiting elasticity and nonlinear Biot poroelasticity."""

__version__ = "0.1.0"
