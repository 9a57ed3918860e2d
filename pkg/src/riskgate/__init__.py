"""Risk-gated dual-arm control at desk scale.

A planar dual-arm simulator with an exact capsule clearance oracle, a small
learned self-collision risk network with calibrated probabilities, and a
gated execution loop (hysteresis gate, recovery, plan refinement,
risk-weighted policy fine-tuning) evaluated on interference-prone and
precision tasks.
"""

__version__ = "0.1.0"
