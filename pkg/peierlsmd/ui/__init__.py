"""Console rendering for peierlsmd."""
from .report import render_analysis, render_branches, render_oracle

__all__ = ["render_analysis", "render_branches", "render_oracle"]
