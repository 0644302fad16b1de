"""Surface reconstruction from visibility-annotated points and facetwise photometric refinement."""

__version__ = "0.1.0"
