"""QA-based pyramid evaluation toolkit for summarization.

Decomposes reference summaries into predicate-level question-answer pairs,
judges their presence in system summaries (human workflow service or
automated backends), scores summaries with repetition and length
penalties, and meta-evaluates automated metrics against gold judgments.
"""

__version__ = "0.1.0"
