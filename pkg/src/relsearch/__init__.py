"""Desk-scale search relevance system.

Five-level relevance scoring built from a jointly-encoding teacher model
trained on soft human labels, a distillation pipeline that pseudo-labels an
engagement log, a feature-based feed-forward student servable in real time,
and the evaluation metrics used to compare them.
"""

import os

# Pin BLAS thread pools before numpy is first imported anywhere in the
# package: fixed reduction order keeps training and scoring reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
