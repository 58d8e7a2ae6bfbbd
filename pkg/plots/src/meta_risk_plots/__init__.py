"""Figure rendering for meta-risk-lab CSV outputs."""

__version__ = "0.1.0"

from .render import EmptyDataError, FigureSpec, MissingColumnError, RenderError, render
