"""Regenerate the shipped initial meshes of the built-in presets.

Every mesh is a union of square cells of side pi/3 (pi/4 for the square),
each split along its lower-left to upper-right diagonal.
"""

import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "eigbounds" / "data"


def cell_mesh(cells, h, dirichlet):
    index = {}
    vertices = []

    def vid(i, j):
        if (i, j) not in index:
            index[(i, j)] = len(vertices)
            vertices.append([i * h, j * h])
        return index[(i, j)]

    triangles = []
    for i, j in cells:
        a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
        triangles += [[a, b, c], [a, c, d]]
    count = {}
    for t in triangles:
        for k in range(3):
            e = tuple(sorted((t[k], t[(k + 1) % 3])))
            count[e] = count.get(e, 0) + 1
    grid = {v: k for k, v in index.items()}
    boundary = []
    for e, n in sorted(count.items()):
        if n == 1:
            p, q = grid[e[0]], grid[e[1]]
            label = "dirichlet" if dirichlet(p, q) else "neumann"
            boundary.append({"edge": list(e), "label": label})
    return {"vertices": vertices, "triangles": triangles, "boundary": boundary}


def dumbbell():
    cells = [(i, j) for i in range(3) for j in range(3)] + [(3, 1)]
    cells += [(i, j) for i in range(4, 7) for j in range(3)]
    lower_path = {((0, 0), (3, 0)), ((3, 0), (3, 1)), ((3, 1), (4, 1)), ((4, 1), (4, 0)), ((4, 0), (7, 0))}

    def on_segment(p, a, b):
        return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])

    def dirichlet(p, q):
        return any(on_segment(p, a, b) and on_segment(q, a, b) for a, b in lower_path)

    return cell_mesh(cells, math.pi / 3, dirichlet)


def square(label):
    cells = [(i, j) for i in range(4) for j in range(4)]
    return cell_mesh(cells, math.pi / 4, lambda p, q: label == "dirichlet")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, doc in [
        ("dumbbell", dumbbell()),
        ("square-dirichlet", square("dirichlet")),
        ("square-neumann", square("neumann")),
    ]:
        (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
