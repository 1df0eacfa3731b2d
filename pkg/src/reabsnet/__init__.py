"""Detect-and-revise adversarial defense toolkit.

A distilled master classifier, a guardian network that flags adversarial
inputs, and a revision loop that perturbs flagged images back across the
guardian's boundary before classification -- plus the FGSM, DeepFool, and
Carlini-Wagner attacks and the evaluation harness used to measure it all.
"""

__version__ = "0.1.0"
