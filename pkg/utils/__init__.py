"""Estimators, surrogates, Langevin dynamics, federation, diagnostics and storage."""
