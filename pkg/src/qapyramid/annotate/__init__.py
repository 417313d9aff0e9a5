"""Annotation workflow service: QA writing, verification, presence judging.

The service generates one QA-writing task per predicate, verification
tasks for every written QA (two verifiers, valid only if both agree),
and presence tasks per (predicate, system summary) judged by three
workers and aggregated by majority vote.  Sparse predicates are requeued
a bounded number of times, qualifications are gated on gold tasks, and
everything persists in an embedded transactional store.
"""

from .service import (AnnotationService, aggregate_verification,
                      DEFAULT_CONFIG, KINDS, REQUIRED_ASSIGNMENTS)
from .api import create_app

__all__ = ["AnnotationService", "aggregate_verification", "create_app",
           "DEFAULT_CONFIG", "KINDS", "REQUIRED_ASSIGNMENTS"]
