"""Dynamic-game trajectory optimization for head-to-head racing.

Core pieces: an exact N-player LQ game solver (``lq_solver``), the iterative
LQ game loop over nonlinear games (``ilq_core``), the racing domain with
analytic derivatives (``racing``), a moving-horizon closed-loop simulator
(``sim``), and Monte-Carlo batch tooling (``batch``) behind a CLI (``cli``).
"""

__version__ = "0.1.0"
