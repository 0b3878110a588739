"""Desk-scale skeleton action recognition with a training-only feature head.

Subpackages of note:

* :mod:`skelhead.tensor` and :mod:`skelhead.gradcheck`: numpy autodiff and
  its finite-difference oracle;
* :mod:`skelhead.data`: skeleton sequences, the dataset format and the
  synthetic ambiguous-action generator;
* :mod:`skelhead.backbone`, :mod:`skelhead.sfhead`, :mod:`skelhead.losses`:
  the model and its objectives;
* :mod:`skelhead.trainer` and :mod:`skelhead.cli`: training, evaluation,
  ablation grids and the ``skelhead`` command.
"""

__version__ = "0.1.0"
