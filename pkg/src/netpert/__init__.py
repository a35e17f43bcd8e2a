"""Toolkit for input-agnostic adversarial perturbations on traffic traces.

Subpackages cover the full experiment loop: synthetic trace corpora and
trace IO (`traffic`), miniature target classifiers (`models`), the
constraint-enforcement remapping layer with custom gradients
(`remapping`), perturbation-generator training (`generator`), attack
metrics and reports (`metrics`), countermeasure training (`defenses`),
and an experiment CLI (`cli`).
"""

__version__ = "0.1.0"
