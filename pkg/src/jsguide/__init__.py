"""Feature-guided fuzzing toolkit for JavaScript engines.

Regex feature catalogs over sources and engine traces, a gradient
boosted tree classifier with exact tree SHAP explanations, time-aware
walk-forward evaluation, and a fuzzing scheduler that keeps mutants
which preserve the features behind their parent's score.
"""

__version__ = "0.1.0"
