"""Network-scale train delay forecasting on a synthetic rail simulator.

Pipeline: a discrete-event simulator produces beacon-style observation
events; cleaning and snapshot assembly turn them into per-train tokens; a
transformer encoder over those tokens predicts how each train's delay
will evolve, against translation, AR(2), and Bayesian-network baselines.
"""

__version__ = "0.1.0"
