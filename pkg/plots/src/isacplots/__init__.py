"""Figure rendering for isacsim CSV bundles."""

from .render import FigureSpec, SchemaError, render, render_bundle

__version__ = "0.1.0"

__all__ = ["FigureSpec", "SchemaError", "render", "render_bundle", "__version__"]
