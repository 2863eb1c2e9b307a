"""Token keep/drop maps as PGM (bit-exact goldens) and SVG (for people)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

# Dropped patches are drawn at this fraction of their brightness.
DARKEN = 0.25


def to_gray(image: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` float image -> ``[H, W]`` uint8 via channel mean and per-image min/max scaling."""
    g = np.asarray(image, dtype=np.float64).mean(axis=0)
    lo, hi = g.min(), g.max()
    if hi <= lo:
        return np.full(g.shape, 128, dtype=np.uint8)
    return np.floor((g - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def keep_mask(kept, grid: int) -> np.ndarray:
    """``[grid, grid]`` booleans; ``kept=None`` keeps every patch."""
    m = np.ones((grid, grid), dtype=bool)
    if kept is not None:
        m[:] = False
        for idx in kept:
            m[idx // grid, idx % grid] = True
    return m


def render_gray(image: np.ndarray, patch: int, kept=None, scale: int = 1) -> np.ndarray:
    """Grayscale map with dropped patches darkened; ``kept=None`` is the plain rendering."""
    g = to_gray(image)
    grid = g.shape[0] // patch
    pix = np.kron(keep_mask(kept, grid), np.ones((patch, patch), dtype=bool))
    out = np.where(pix, g, np.floor(g * DARKEN).astype(np.uint8)).astype(np.uint8)
    if scale > 1:
        out = np.kron(out, np.ones((scale, scale), dtype=np.uint8))
    return out


def pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def svg_text(image: np.ndarray, patch: int, kept=None, scale: int = 8) -> str:
    """Pixels as rects, dropped patches overlaid with a dark hatched square."""
    g = to_gray(image)
    H, W = g.shape
    grid = H // patch
    mask = keep_mask(kept, grid)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale}" height="{H * scale}" '
        f'viewBox="0 0 {W} {H}" shape-rendering="crispEdges">',
        '<defs><pattern id="hatch" width="2" height="2" patternUnits="userSpaceOnUse" '
        'patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="2" stroke="#d33" stroke-width="0.4"/>'
        "</pattern></defs>",
    ]
    for y in range(H):
        for x in range(W):
            v = int(g[y, x])
            lines.append(f'<rect x="{x}" y="{y}" width="1" height="1" fill="rgb({v},{v},{v})"/>')
    for r in range(grid):
        for c in range(grid):
            if not mask[r, c]:
                x, y = c * patch, r * patch
                lines.append(f'<rect x="{x}" y="{y}" width="{patch}" height="{patch}" fill="black" fill-opacity="0.7"/>')
                lines.append(f'<rect x="{x}" y="{y}" width="{patch}" height="{patch}" fill="url(#hatch)"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_map(out_dir, stem: str, image: np.ndarray, patch: int, kept=None, scale: int = 4) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"{stem}.pgm"
    svg = out_dir / f"{stem}.svg"
    pgm.write_bytes(pgm_bytes(render_gray(image, patch, kept, scale)))
    svg.write_text(svg_text(image, patch, kept), encoding="utf-8")
    return [pgm, svg]
