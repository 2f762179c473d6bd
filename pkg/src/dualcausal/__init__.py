"""Two-route deconfounding for multimodal answer classification.

A confounder-dictionary adjustment branch and an instrument-extraction branch
with variational mutual-information penalties, trained jointly on numpy.
"""

__version__ = "0.1.0"
