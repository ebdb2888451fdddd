"""Mutual-Taught simulation lab.

Co-trains a tabular policy and a tabular reward model from each other's outputs on
synthetic alignment problems, where win rates, expected reward and preference
accuracy can be computed exactly.
"""

__version__ = "0.1.0"
