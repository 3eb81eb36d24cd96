"""Figure rendering for the CLI report paths.

Every CSV the CLI emits gets a companion PNG: per-dimension predictive
bands for predictions, error-versus-density curves for benchmarks, and a
small overview grid for generated datasets.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _grid(n_dims):
    cols = min(4, max(1, int(np.ceil(np.sqrt(n_dims)))))
    rows = int(np.ceil(n_dims / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.2 * rows), squeeze=False)
    return fig, axes.ravel()


def plot_predictions(times, mean, var, dim_names, out_path, observations=None):
    """Predictive mean with a 2-standard-deviation band per dimension.

    ``observations`` is an optional (times, values, mask) triple overlaid
    as dots.
    """
    n_dims = mean.shape[1]
    fig, axes = _grid(n_dims)
    for d in range(n_dims):
        ax = axes[d]
        sd = np.sqrt(np.maximum(var[:, d], 0.0)) if np.all(np.isfinite(var[:, d])) else None
        ax.plot(times, mean[:, d], lw=1.2, color="C0")
        if sd is not None:
            ax.fill_between(
                times, mean[:, d] - 2 * sd, mean[:, d] + 2 * sd, alpha=0.25, color="C0"
            )
        if observations is not None:
            t_obs, v_obs, m_obs = observations
            sel = m_obs[:, d]
            ax.plot(t_obs[sel], v_obs[sel, d], ".", ms=3, color="C3")
        ax.set_title(dim_names[d], fontsize=9)
    for ax in axes[n_dims:]:
        ax.set_visible(False)
    fig.suptitle("predictive mean ± 2 sd over time", fontsize=10)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_benchmark(table, out_path):
    """Mean reconstruction error versus observation density per method."""
    methods = []
    for c in table.cells:
        if c.method not in methods:
            methods.append(c.method)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for m in methods:
        pts = [(c.density, c.mean_error, c.sd_error) for c in table.cells if c.method == m and c.errors]
        if not pts:
            continue
        pts.sort()
        d, mu, sd = zip(*pts)
        ax.errorbar(d, mu, yerr=sd, marker="o", ms=4, capsize=3, label=m)
    ax.set_xlabel("observation density")
    ax.set_ylabel("absolute sum of error")
    ax.invert_xaxis()
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_dataset(data, out_path):
    """Observed entries (dots) and ground truth (line, if present)."""
    fig, axes = _grid(data.n_dims)
    for d in range(data.n_dims):
        ax = axes[d]
        if data.ground_truth is not None:
            ax.plot(data.times, data.ground_truth[:, d], lw=1.0, color="C2")
        sel = data.mask[:, d]
        ax.plot(data.times[sel], data.values[sel, d], ".", ms=3, color="C3")
        ax.set_title(data.dim_names[d], fontsize=9)
    for ax in axes[data.n_dims:]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
