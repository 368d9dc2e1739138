"""Two-stage top-bottom outfit retrieval.

Stage 1 translates a top image into a generated bottom "template"; stage 2
scores (top, template) queries against candidate bottoms in a shared
embedding space. See the README for the pipeline walkthrough.
"""

__version__ = "0.1.0"
