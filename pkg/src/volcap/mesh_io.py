"""PLY (ascii/binary) and OBJ mesh files."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def save_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    has_color = mesh.colors is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {mesh.n_vertices}")
    header += [f"property float {ax}" for ax in "xyz"]
    header += [f"property float n{ax}" for ax in "xyz"]
    if has_color:
        header += [f"property uchar {ch}" for ch in ("red", "green", "blue")]
    header.append(f"element face {mesh.n_triangles}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vert = np.concatenate([mesh.vertices, mesh.normals], axis=1).astype("<f4")
            if has_color:
                rgb = np.round(mesh.colors * 255).clip(0, 255).astype(np.uint8)
                rows = []
                for i in range(mesh.n_vertices):
                    rows.append(vert[i].tobytes() + rgb[i].tobytes())
                f.write(b"".join(rows))
            else:
                f.write(vert.tobytes())
            counts = np.full((mesh.n_triangles, 1), 3, dtype=np.uint8)
            tris = mesh.triangles.astype("<i4")
            rows = [counts[i].tobytes() + tris[i].tobytes() for i in range(mesh.n_triangles)]
            f.write(b"".join(rows))
        else:
            lines = []
            for i in range(mesh.n_vertices):
                parts = [f"{v:.8f}" for v in mesh.vertices[i]] + [f"{v:.8f}" for v in mesh.normals[i]]
                if has_color:
                    rgb = np.round(mesh.colors[i] * 255).clip(0, 255).astype(int)
                    parts += [str(int(v)) for v in rgb]
                lines.append(" ".join(parts))
            for tri in mesh.triangles:
                lines.append("3 " + " ".join(str(int(v)) for v in tri))
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def load_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header_lines = data[:end].decode("ascii").splitlines()
    body = data[end:]

    binary = any("binary_little_endian" in ln for ln in header_lines)
    n_vert = n_face = 0
    vertex_props: list[str] = []
    current = None
    for ln in header_lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
            vertex_props.append(parts[2])

    has_color = "red" in vertex_props
    if binary:
        vert_size = 4 * 6 + (3 if has_color else 0)
        verts = np.zeros((n_vert, 3))
        normals = np.zeros((n_vert, 3))
        colors = np.zeros((n_vert, 3)) if has_color else None
        off = 0
        for i in range(n_vert):
            row = np.frombuffer(body, dtype="<f4", count=6, offset=off)
            verts[i] = row[:3]
            normals[i] = row[3:6]
            if has_color:
                rgb = np.frombuffer(body, dtype=np.uint8, count=3, offset=off + 24)
                colors[i] = rgb / 255.0
            off += vert_size
        tris = np.zeros((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            count = body[off]
            if count != 3:
                raise ValueError("only triangle faces supported")
            tris[i] = np.frombuffer(body, dtype="<i4", count=3, offset=off + 1)
            off += 1 + 12
    else:
        lines = body.decode("ascii").splitlines()
        verts = np.zeros((n_vert, 3))
        normals = np.zeros((n_vert, 3))
        colors = np.zeros((n_vert, 3)) if has_color else None
        for i in range(n_vert):
            vals = lines[i].split()
            verts[i] = [float(v) for v in vals[0:3]]
            normals[i] = [float(v) for v in vals[3:6]]
            if has_color:
                colors[i] = [int(v) / 255.0 for v in vals[6:9]]
        tris = np.array([[int(v) for v in lines[n_vert + i].split()[1:4]]
                         for i in range(n_face)], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, tris, normals, colors)


def save_obj(path, mesh: TriangleMesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}")
    for tri in mesh.triangles:
        a, b, c = (int(i) + 1 for i in tri)
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
