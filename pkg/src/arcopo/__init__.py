"""Desk-scale lab for contrastive policy optimization of chunked autoregressive generators."""

from .errors import ArcopoError, InvalidArgument, NotFound, NumericFailure, UnsupportedOperation

__version__ = "0.1.0"
