"""Optional SVG rendering of query results (needs matplotlib)."""
import numpy as np

from .exceptions import ConfigError


def save_svg(result, path, title=None):
    """Line plot with band for 1-d results, heatmap of the median for 2-d results."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("SVG export needs matplotlib (pip install 'artifact[plot]')") from None
    names = list(result.axes)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(names) == 1:
        x = result.axes[names[0]]
        ax.fill_between(x, result.lower, result.upper, alpha=0.3, linewidth=0)
        ax.plot(x, result.median)
        ax.axhline(0.0, color="0.5", linewidth=0.5)
        ax.set_xlabel(names[0])
        ax.set_ylabel(f"change in {result.statistic}")
    else:
        a, b = result.axes[names[0]], result.axes[names[1]]
        mesh = ax.pcolormesh(b, a, np.asarray(result.median), shading="auto", cmap="coolwarm")
        fig.colorbar(mesh, ax=ax, label=f"change in {result.statistic}")
        ax.set_xlabel(names[1])
        ax.set_ylabel(names[0])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
