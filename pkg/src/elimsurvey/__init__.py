"""Geostatistical design and analysis of disease-elimination prevalence surveys.

The toolkit fits a binomial-logit Gaussian process model to georeferenced
prevalence data, predicts the probability that evaluation-unit prevalence
lies below an elimination threshold, draws spatially regulated sampling
designs, and estimates a design's negative/positive predictive value by
simulation.
"""

__version__ = "0.1.0"
