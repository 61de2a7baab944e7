"""Gaussian-mixture Bayes filtering for planar robot localization."""
