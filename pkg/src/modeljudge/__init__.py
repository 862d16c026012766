"""Ownership testing for neural-network classifiers.

Builds a numpy model zoo (victim, derived copies, independent models),
generates black-box and white-box test suites from the victim, measures
six distances to a suspect and turns them into a copy verdict.
"""

__version__ = "0.1.0"
