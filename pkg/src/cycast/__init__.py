"""Short-term tropical cyclone structure and intensity guidance.

The pipeline reduces TC-centered infrared stamps to quadrant radial
profiles, simulates ensembles of future profile trajectories with an
autoregressive generative model, and converts observed plus simulated
structure into +6 h and +12 h intensity forecasts with verification
against persistence baselines.
"""

__version__ = "0.1.0"
