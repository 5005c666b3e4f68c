import logging
from pathlib import Path

from matplotlib.figure import Figure


log = logging.getLogger('plotting')


def plot_coverage_accuracy(summaries, path, title=None):
    # Grid points with no successful run are left out
    points = []
    for summary in summaries:
        data = summary.to_dict()
        if data['coverage_mean'] is None or data['selective_accuracy_mean'] is None:
            continue
        points.append((
            data['coverage_mean'],
            data['selective_accuracy_mean'],
            data['coverage_std'] or 0.0,
            data['selective_accuracy_std'] or 0.0,
            summary.param
        ))
    points.sort()

    fig = Figure(figsize=(6.0, 4.5))
    ax = fig.add_subplot()
    if points:
        xs, ys, xerr, yerr, params = zip(*points)
        ax.errorbar(xs, ys, xerr=xerr, yerr=yerr, marker='o', capsize=3, linewidth=1.2)
        for x, y, param in zip(xs, ys, params):
            ax.annotate(f'{param:g}', (x, y), textcoords='offset points', xytext=(4, 4), fontsize=8)
    else:
        ax.text(0.5, 0.5, 'no successful runs', ha='center', va='center', transform=ax.transAxes)

    ax.set_xlabel('Coverage')
    ax.set_ylabel('Selective accuracy')
    ax.set_xlim(0.0, 1.02)
    ax.grid(True, linestyle=':', linewidth=0.6)
    if title:
        ax.set_title(title)
    fig.tight_layout()

    path = Path(path)
    try:
        fig.savefig(path, format='svg')
    except OSError as e:
        raise OSError(e.errno, 'Failed to write curve', str(path)) from e
    log.debug(f"Wrote coverage-accuracy curve with {len(points)} points to '{path}'")
