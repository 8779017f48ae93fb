"""Report figures: a dependency-free SVG spectrum plot and matplotlib PNGs."""

from __future__ import annotations

import io
from xml.sax.saxutils import escape

import numpy as np

from . import physics
from .fileio import atomic_write

# SVG canvas and plot box, in px
_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 20, 20, 50


def _sx(f_ghz):
    span = physics.F_STOP_GHZ - physics.F_START_GHZ
    return _LEFT + (np.asarray(f_ghz) - physics.F_START_GHZ) / span * (_W - _LEFT - _RIGHT)


def _sy(db):
    span = physics.DB_CEIL - physics.DB_FLOOR
    return _TOP + (physics.DB_CEIL - np.asarray(db)) / span * (_H - _TOP - _BOTTOM)


def _points(freqs, values) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(_sx(freqs), _sy(values)))


def spectrum_svg(freqs_ghz, predicted_db, oracle_db, threshold_db=-10.0, title="") -> str:
    """Predicted and oracle S11 on fixed [2, 18] GHz x [-40, 0] dB axes."""
    x0, x1 = _LEFT, _W - _RIGHT
    y0, y1 = _TOP, _H - _BOTTOM
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
        'fill="white" stroke="black"/>',
    ]
    for f in range(2, 19, 2):
        x = float(_sx(f))
        parts.append(f'<line x1="{x:.2f}" y1="{y1}" x2="{x:.2f}" y2="{y1 + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{y1 + 16}" text-anchor="middle">{f}</text>')
    for db in range(-40, 1, 10):
        y = float(_sy(db))
        parts.append(f'<line x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{db}</text>')
    yt = float(_sy(threshold_db))
    parts.append(
        f'<line class="threshold" x1="{x0}" y1="{yt:.2f}" x2="{x1}" y2="{yt:.2f}" '
        'stroke="gray" stroke-dasharray="5,4"/>'
    )
    parts.append(
        f'<polyline class="oracle" fill="none" stroke="black" stroke-width="1.5" '
        f'points="{_points(freqs_ghz, oracle_db)}"/>'
    )
    parts.append(
        f'<polyline class="predicted" fill="none" stroke="crimson" stroke-width="1.5" '
        f'stroke-dasharray="6,3" points="{_points(freqs_ghz, predicted_db)}"/>'
    )
    parts.append(
        f'<text x="{(x0 + x1) / 2}" y="{_H - 12}" text-anchor="middle">Frequency (GHz)</text>'
    )
    parts.append(
        f'<text x="14" y="{(y0 + y1) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2})">S11 (dB)</text>'
    )
    lx, ly = x1 - 150, y1 - 40
    parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 25}" y2="{ly}" stroke="black" stroke-width="1.5"/>')
    parts.append(f'<text x="{lx + 30}" y="{ly + 4}">oracle</text>')
    parts.append(
        f'<line x1="{lx}" y1="{ly + 16}" x2="{lx + 25}" y2="{ly + 16}" stroke="crimson" '
        'stroke-width="1.5" stroke-dasharray="6,3"/>'
    )
    parts.append(f'<text x="{lx + 30}" y="{ly + 20}">predicted</text>')
    if title:
        parts.append(f'<text x="{x0}" y="{y0 - 6}">{escape(title)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- matplotlib figures ------------------------------------------------------


def _figure(nrows=1, ncols=1, size=(7, 4)):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(nrows, ncols, figsize=size)
    return plt, fig, ax


def _save(plt, fig, path):
    buf = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buf, format="png", dpi=110)
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def history_figure(history, path):
    """Huber loss and validation CS per epoch."""
    plt, fig, (ax1, ax2) = _figure(1, 2, (10, 4))
    epochs = [h["epoch"] for h in history]
    ax1.semilogy(epochs, [h["train_huber"] for h in history], label="train Huber")
    ax1.semilogy(epochs, [h["val_mse"] for h in history], label="val MSE")
    ax1.set_xlabel("epoch")
    ax1.legend()
    ax2.plot(epochs, [h["train_cs"] for h in history], label="train")
    ax2.plot(epochs, [h["val_cs"] for h in history], label="val")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("cosine similarity")
    ax2.legend()
    return _save(plt, fig, path)


def sweep_figure(rows, path, selected=None):
    """Validation MSE and MAE against the Huber delta."""
    plt, fig, ax = _figure()
    deltas = [r["delta"] for r in rows]
    ax.plot(deltas, [r["val_mse"] for r in rows], "o-", label="val MSE")
    ax.plot(deltas, [r["val_mae"] for r in rows], "s--", label="val MAE")
    if selected is not None:
        ax.axvline(selected, color="gray", ls=":", label=f"selected {selected:g}")
    ax.set_xlabel("Huber delta")
    ax.set_yscale("log")
    ax.legend()
    return _save(plt, fig, path)


def eval_figure(freqs_ghz, predicted_db, target_db, path, max_panels=4):
    """A few predicted-vs-target spectra plus a pointwise scatter."""
    k = min(max_panels, predicted_db.shape[0])
    plt, fig, axes = _figure(1, k + 1, (3.2 * (k + 1), 3.2))
    axes = np.atleast_1d(axes)
    for i in range(k):
        ax = axes[i]
        ax.plot(freqs_ghz, target_db[i], "k-", lw=1.2, label="oracle")
        ax.plot(freqs_ghz, predicted_db[i], "r--", lw=1.2, label="predicted")
        ax.axhline(-10.0, color="gray", ls=":")
        ax.set_xlim(physics.F_START_GHZ, physics.F_STOP_GHZ)
        ax.set_ylim(physics.DB_FLOOR, physics.DB_CEIL)
        ax.set_xlabel("GHz")
        if i == 0:
            ax.set_ylabel("S11 (dB)")
            ax.legend(fontsize=7)
    ax = axes[-1]
    ax.plot(target_db.ravel(), predicted_db.ravel(), ",", alpha=0.5)
    ax.plot([-40, 0], [-40, 0], "k-", lw=0.8)
    ax.set_xlabel("oracle (dB)")
    ax.set_ylabel("predicted (dB)")
    return _save(plt, fig, path)
