"""Adaptive space-time isogeometric solver for the linear heat equation.

Single-patch NURBS geometry, truncated hierarchical B-spline refinement,
a locally stabilized space-time Galerkin scheme, and guaranteed functional
a posteriori error bounds with an exact error identity.
"""

__version__ = "0.1.0"
