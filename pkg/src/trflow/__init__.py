"""Mean curvature flow of totally real submanifolds in Kahler-Einstein ambients.

Library layout:

- `ambient`: closed-form evaluators for the flat torus and Fubini-Study models
- `immersion`: periodic-grid storage and differentiation of immersions, presets
- `geometry`: per-node tensor cache and structural identity checkers
- `hodge`: discrete exterior calculus and eigenvalues of the evolving metric
- `flow`: time integration, diagnostics, control certificates
- `cli`: batch experiment runner (`trflow run|verify|presets|inspect`)
"""

__version__ = "0.1.0"
