"""De Bruijn color-stripe pattern: sequence, node graph, renderer, decoder.

The pattern is a grid of colored stripes.  One De Bruijn sequence drives
both axes; horizontal stripes map symbols onto the odd color codes and
vertical stripes onto the even ones, so the two classes never collide.
Stripe crossings are the pattern nodes used for correspondences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Color codes 1..8. Lime is full-intensity green, green the half-intensity
# one; that 50% channel gap is what keeps the two distinguishable.
COLOR_RGB = {
    1: (255, 0, 0),  # red
    2: (255, 255, 0),  # yellow
    3: (0, 255, 0),  # lime
    4: (0, 128, 0),  # green
    5: (0, 255, 255),  # cyan
    6: (0, 0, 255),  # blue
    7: (128, 0, 128),  # purple
    8: (255, 0, 255),  # magenta
}
HORIZONTAL_CLASS = (1, 3, 5, 7)
VERTICAL_CLASS = (2, 4, 6, 8)


class PatternError(ValueError):
    pass


def generate_debruijn_sequence(k: int, n: int) -> list[int]:
    """Lexicographically least De Bruijn sequence B(k, n) of length k**n.

    Standard Lyndon-word concatenation: emit every Lyndon word over the
    alphabet whose length divides n, in lexicographic order.
    """
    if k < 2 or n < 1 or k**n > 10**6:
        raise PatternError("alphabet size or order out of range")
    a = [0] * (n + 1)
    sequence: list[int] = []

    def db(t: int, p: int) -> None:
        if t > n:
            if n % p == 0:
                sequence.extend(a[1 : p + 1])
        else:
            a[t] = a[t - p]
            db(t + 1, p)
            for j in range(a[t - p] + 1, k):
                a[t] = j
                db(t + 1, t)

    db(1, 1)
    return sequence


@dataclass(frozen=True)
class PatternNode:
    row: int
    col: int
    x_p: tuple[float, float]
    x_c: tuple[float, float] | None = None
    x_m: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class PatternEdge:
    a: tuple[int, int]
    b: tuple[int, int]
    pixels: tuple[tuple[int, int], ...]
    color: int


@dataclass
class PatternGraph:
    k: int
    n: int
    m: int
    resolution: tuple[int, int]
    spacing: tuple[int, int]
    offset: tuple[int, int]
    h_colors: np.ndarray
    v_colors: np.ndarray
    node_pixels: np.ndarray  # (m, m, 2) float, [row, col] -> (x, y)
    edges: list[PatternEdge] = field(default_factory=list)
    _h_index: dict = field(default_factory=dict, repr=False)
    _v_index: dict = field(default_factory=dict, repr=False)

    def node(self, row: int, col: int) -> PatternNode:
        x, y = self.node_pixels[row, col]
        return PatternNode(row, col, (float(x), float(y)))

    def iter_nodes(self):
        for row in range(self.m):
            for col in range(self.m):
                yield self.node(row, col)

    def read_windows(self, row: int, col: int) -> tuple[tuple, tuple]:
        """Color windows anchored at a cell: rows row..row+n-1, cols likewise."""
        h = tuple(int(c) for c in self.h_colors[row : row + self.n])
        v = tuple(int(c) for c in self.v_colors[col : col + self.n])
        return h, v


def build_pattern_graph(k: int, n: int, stripe_spacing_px=12,
                        projector_resolution=(800, 600)) -> PatternGraph:
    """Build the stripe grid and its node graph.

    A scalar spacing applies to both axes but shrinks independently per
    axis when the grid would not fit that axis; the build fails only when
    not even unit spacing fits the stripe count.
    """
    if not 2 <= k <= 4:
        raise PatternError("alphabet size must be between 2 and 4 for color coding")
    seq = generate_debruijn_sequence(k, n)
    stripes = seq + seq[:2]
    m = len(stripes)  # k**n + 2

    width, height = int(projector_resolution[0]), int(projector_resolution[1])
    if np.isscalar(stripe_spacing_px):
        req = (int(stripe_spacing_px), int(stripe_spacing_px))
    else:
        req = (int(stripe_spacing_px[0]), int(stripe_spacing_px[1]))
    if req[0] < 1 or req[1] < 1:
        raise PatternError("stripe spacing must be at least one pixel")
    sx = min(req[0], (width - 1) // (m - 1))
    sy = min(req[1], (height - 1) // (m - 1))
    if sx < 1 or sy < 1:
        raise PatternError("pattern exceeds resolution")
    ox = (width - 1 - (m - 1) * sx) // 2
    oy = (height - 1 - (m - 1) * sy) // 2

    h_colors = np.array([HORIZONTAL_CLASS[s] for s in stripes], dtype=int)
    v_colors = np.array([VERTICAL_CLASS[s] for s in stripes], dtype=int)

    xs = ox + sx * np.arange(m)
    ys = oy + sy * np.arange(m)
    node_pixels = np.zeros((m, m, 2))
    node_pixels[..., 0] = xs[None, :]
    node_pixels[..., 1] = ys[:, None]

    edges: list[PatternEdge] = []
    for row in range(m):
        y = int(ys[row])
        for col in range(m - 1):
            px = tuple((int(x), y) for x in range(int(xs[col]), int(xs[col + 1]) + 1))
            edges.append(PatternEdge((row, col), (row, col + 1), px, int(h_colors[row])))
    for col in range(m):
        x = int(xs[col])
        for row in range(m - 1):
            px = tuple((x, int(y)) for y in range(int(ys[row]), int(ys[row + 1]) + 1))
            edges.append(PatternEdge((row, col), (row + 1, col), px, int(v_colors[col])))

    graph = PatternGraph(
        k=k, n=n, m=m,
        resolution=(width, height),
        spacing=(sx, sy),
        offset=(int(ox), int(oy)),
        h_colors=h_colors,
        v_colors=v_colors,
        node_pixels=node_pixels,
        edges=edges,
    )
    # First occurrence wins; for n >= 3 every window is unique anyway.
    for row in range(m - n + 1):
        key = tuple(int(c) for c in h_colors[row : row + n])
        graph._h_index.setdefault(key, row)
    for col in range(m - n + 1):
        key = tuple(int(c) for c in v_colors[col : col + n])
        graph._v_index.setdefault(key, col)
    return graph


def locate_window(h_window, v_window, graph: PatternGraph) -> tuple[int, int]:
    """Decode a color-window pair to the grid cell anchoring it (top-left)."""
    h = tuple(int(c) for c in h_window)
    v = tuple(int(c) for c in v_window)
    if h not in graph._h_index or v not in graph._v_index:
        raise PatternError("invalid codeword")
    return graph._h_index[h], graph._v_index[v]


def render_pattern_image(graph: PatternGraph, stripe_width_px: int = 4) -> np.ndarray:
    """Rasterize the pattern: black ground, horizontal stripes, vertical on top."""
    w = int(stripe_width_px)
    if w < 1 or w >= min(graph.spacing):
        raise PatternError("stripe width must be smaller than the stripe spacing")
    width, height = graph.resolution
    img = np.zeros((height, width, 3), dtype=np.uint8)
    lo = (w - 1) // 2
    hi = w - lo
    for row in range(graph.m):
        y = int(graph.node_pixels[row, 0, 1])
        y0, y1 = max(0, y - lo), min(height, y + hi)
        img[y0:y1, :, :] = COLOR_RGB[int(graph.h_colors[row])]
    for col in range(graph.m):
        x = int(graph.node_pixels[0, col, 0])
        x0, x1 = max(0, x - lo), min(width, x + hi)
        img[:, x0:x1, :] = COLOR_RGB[int(graph.v_colors[col])]
    return img


def save_pattern_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def graph_to_json(graph: PatternGraph) -> dict:
    """Serializable graph: nodes with pixel positions, edges with colors."""
    return {
        "schema": 1,
        "k": graph.k,
        "n": graph.n,
        "m": graph.m,
        "resolution": list(graph.resolution),
        "spacing": list(graph.spacing),
        "horizontal_colors": [int(c) for c in graph.h_colors],
        "vertical_colors": [int(c) for c in graph.v_colors],
        "nodes": [
            {"grid": [r, c], "x_p": [float(graph.node_pixels[r, c, 0]),
                                     float(graph.node_pixels[r, c, 1])]}
            for r in range(graph.m)
            for c in range(graph.m)
        ],
        "edges": [
            {"a": list(e.a), "b": list(e.b), "color": e.color} for e in graph.edges
        ],
    }


def save_graph_json(graph: PatternGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json(graph), fh)
