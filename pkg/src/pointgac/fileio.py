"""Atomic file writes and the ASCII point-cloud / patch formats."""
import json
import os
import tempfile

import numpy as np

from .geometry import PointCloud


class CloudParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def atomic_write_bytes(path, payload):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_cloud(cloud):
    lines = []
    if cloud.labels is None:
        for x, y, z in cloud.points.tolist():
            lines.append(f"{x!r} {y!r} {z!r}")
    else:
        for (x, y, z), lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
            lines.append(f"{x!r} {y!r} {z!r} {lab}")
    return "\n".join(lines) + "\n"


def save_cloud(path, cloud):
    # repr() of a float round-trips exactly (shortest repr, <= 17 digits)
    atomic_write_text(path, format_cloud(cloud))


def parse_cloud(text, path="<string>"):
    points, labels = [], []
    labeled = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise CloudParseError(path, lineno, f"expected 'x y z [label]', got {len(parts)} fields")
        has_label = len(parts) == 4
        if labeled is None:
            labeled = has_label
        elif labeled != has_label:
            raise CloudParseError(path, lineno, "label column present on some lines only")
        try:
            points.append([float(v) for v in parts[:3]])
            if has_label:
                labels.append(int(parts[3]))
        except ValueError as exc:
            raise CloudParseError(path, lineno, str(exc)) from None
    if not points:
        raise CloudParseError(path, 0, "no points")
    try:
        return PointCloud(np.array(points), np.array(labels) if labeled else None)
    except ValueError as exc:
        raise CloudParseError(path, 0, str(exc)) from None


def load_cloud(path):
    with open(path) as fh:
        return parse_cloud(fh.read(), os.fspath(path))


def save_patches(path, patches):
    """``point_index patch_id`` lines plus a ``<path>.json`` sidecar."""
    lines = [f"{i} {p}" for i, p in enumerate(patches.patch_of.tolist())]
    atomic_write_text(path, "\n".join(lines) + "\n")
    sidecar = {
        "num_patches": int(patches.num_patches),
        "overlapping": bool(patches.overlapping),
        "centers": patches.centers.tolist(),
        "center_labels": [int(v) for v in patches.center_labels],
        "center_indices": None if patches.center_indices is None
        else [int(v) for v in patches.center_indices],
        "patch_points": [[int(v) for v in p] for p in patches.patch_points],
    }
    atomic_write_text(os.fspath(path) + ".json", json.dumps(sidecar, indent=1, sort_keys=True))
