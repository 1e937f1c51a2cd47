"""Optimal control of a two-speed ball-screw actuator.

Modules: ``model`` (dynamics and costs), ``dp_solver`` (value iteration on a
state grid), ``policy_fit`` (piecewise-linear law from a tabular policy),
``stability`` (energy checks for the law), ``simulator`` and ``cli``.
"""
