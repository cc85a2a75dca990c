"""File formats: Gaussian sets, cameras, key=value configs, reports, PPM.

``GSOCC v1`` is the Gaussian set format: one ASCII header line
``GSOCC 1 <P> <C>`` followed by P lines of ``11 + C`` numbers each:
mean (3), scale (3), quaternion wxyz (4), opacity (1), logits (C).
Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly.

The camera file has three fixed sections: ``fx fy cx cy``, then
``width height``, then four rows of the camera-to-world transform.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from .core import GaussianSet
from .rays import CameraModel


def format_number(value) -> str:
    """Shortest exact decimal for ints, 17 significant digits for floats."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


# -- GSOCC v1 ----------------------------------------------------------------


def save_gaussian_set(path, gs: GaussianSet) -> None:
    p, c = len(gs), gs.num_classes
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"GSOCC 1 {p} {c}\n")
        for i in range(p):
            row = np.concatenate(
                [gs.means[i], gs.scales[i], gs.rotations[i], [gs.opacities[i]], gs.logits[i]]
            )
            fh.write(" ".join(format_number(v) for v in row) + "\n")


def load_gaussian_set(path) -> GaussianSet:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "GSOCC" or header[1] != "1":
            raise ValueError(f"{path}: not a GSOCC v1 file")
        p, c = int(header[2]), int(header[3])
        rows = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if rows.shape != (p, 11 + c):
        raise ValueError(f"{path}: expected {p} rows of {11 + c} numbers, got {rows.shape}")
    return GaussianSet(
        means=rows[:, 0:3],
        scales=rows[:, 3:6],
        rotations=rows[:, 6:10],
        opacities=rows[:, 10],
        logits=rows[:, 11:],
    )


# -- camera file ---------------------------------------------------------------


def save_camera(path, cam: CameraModel) -> None:
    k = cam.intrinsics
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(format_number(v) for v in (k[0, 0], k[1, 1], k[0, 2], k[1, 2])) + "\n")
        fh.write(f"{cam.width} {cam.height}\n")
        for row in cam.pose:
            fh.write(" ".join(format_number(v) for v in row) + "\n")


def load_camera(path) -> CameraModel:
    with open(path, "r", encoding="ascii") as fh:
        tokens = [line.split() for line in fh if line.strip()]
    if len(tokens) != 6:
        raise ValueError(f"{path}: camera file needs 6 lines, found {len(tokens)}")
    fx, fy, cx, cy = (float(v) for v in tokens[0])
    width, height = (int(v) for v in tokens[1])
    pose = np.array([[float(v) for v in row] for row in tokens[2:6]])
    intrinsics = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraModel(intrinsics=intrinsics, pose=pose, image_size=(width, height))


# -- key=value files -----------------------------------------------------------


def read_key_values(path) -> dict[str, str]:
    """Parse a flat config file; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_key_values(path, mapping: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value if isinstance(value, str) else format_number(value)}\n")


def write_report(path, mapping: Mapping[str, object]) -> None:
    """Write a metrics report; '.json' paths get the structured variant,
    everything else the flat metric=value form."""
    if str(path).endswith(".json"):
        payload = {
            k: (float(v) if isinstance(v, (float, np.floating)) else int(v) if isinstance(v, (int, np.integer)) else v)
            for k, v in mapping.items()
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        write_key_values(path, mapping)


# -- PPM image ------------------------------------------------------------------


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM (P6)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
