"""topopatch: local-global 3D volume classification.

Patch-based 3D convolutional classifiers for local signal, cubical
persistent homology + persistence images for global topology, and ensemble
fusion of the two, with a patient-stratified cross-validation protocol and
a synthetic phantom generator for end-to-end validation.
"""

__version__ = "0.1.0"
