"""Optimal active power dispatch with a double deep Q-network agent.

Modules: ``network`` (grid data and parsers), ``powerflow`` (Newton-Raphson
AC power flow), ``env`` (dispatch environment), ``neural`` (MLP and
checkpoints), ``agent`` (DDQN training and evaluation), ``oracle`` (lattice
reference dispatch) and ``cli``.
"""

__version__ = "0.1.0"
