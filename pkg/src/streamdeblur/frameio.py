"""Frame and manifest I/O: PNG/PPM images, pair manifests, file hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_EXTENSIONS = (".png", ".ppm")


@dataclass
class PairSequence:
    """One video's aligned blurry/sharp frames in (T, 3, H, W) float32 layout."""

    blurry: np.ndarray
    sharp: np.ndarray
    fps: float = 0.0

    def __post_init__(self):
        if self.blurry.shape != self.sharp.shape:
            raise ValueError(
                f"blurry/sharp shapes differ: {self.blurry.shape} vs {self.sharp.shape}"
            )

    def __len__(self) -> int:
        return self.blurry.shape[0]


def hwc_to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def chw_to_hwc(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(img, 0, -1))


def load_frame(path: str | Path) -> np.ndarray:
    """Read an image file into an (H, W, 3) float32 array in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_frame(path: str | Path, img: np.ndarray) -> None:
    """Write an (H, W, 3) array in [0, 1] as 8-bit PNG or binary PPM."""
    path = Path(path)
    if path.suffix.lower() not in FRAME_EXTENSIONS:
        raise ValueError(f"unsupported frame format {path.suffix!r}, use one of {FRAME_EXTENSIONS}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path)


def find_frames(source: str | Path) -> list[Path]:
    """Frame files from a directory or a glob pattern, sorted by name."""
    src = Path(source)
    if src.is_dir():
        files = [p for p in src.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS]
    else:
        files = [p for p in src.parent.glob(src.name) if p.suffix.lower() in FRAME_EXTENSIONS]
    return sorted(files)


def load_frame_stack(paths: list[Path]) -> np.ndarray:
    if not paths:
        raise ValueError("no frames found")
    frames = [load_frame(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValueError(f"frames disagree on dimensions: {sorted(shapes)}")
    return np.stack(frames)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_pair_manifest(
    path: str | Path,
    pair_files: list[dict],
    fps: float,
    tau: int,
    interval: int,
    provenance: dict,
) -> None:
    """Record synthesized pairs plus everything needed to reproduce them."""
    write_json(
        path,
        {
            "kind": "blur-pairs",
            "fps": fps,
            "tau": tau,
            "interval": interval,
            "pairs": pair_files,
            "provenance": provenance,
        },
    )


def load_pair_manifest(path: str | Path) -> PairSequence:
    path = Path(path)
    manifest = read_json(path)
    if manifest.get("kind") != "blur-pairs":
        raise ValueError(f"{path} is not a blur-pairs manifest")
    root = path.parent
    blurry = []
    sharp = []
    for entry in manifest["pairs"]:
        blurry.append(hwc_to_chw(load_frame(root / entry["blurry"])))
        sharp.append(hwc_to_chw(load_frame(root / entry["sharp"])))
    if not blurry:
        raise ValueError(f"{path} lists no pairs")
    return PairSequence(
        blurry=np.stack(blurry), sharp=np.stack(sharp), fps=float(manifest.get("fps", 0.0))
    )


def collect_pair_manifests(source: str | Path) -> list[Path]:
    """Manifest paths from a file, a directory, or a glob pattern."""
    src = Path(source)
    if src.is_file():
        return [src]
    if src.is_dir():
        found = sorted(src.rglob("*.json"))
    else:
        found = sorted(src.parent.glob(src.name))
    manifests = []
    for p in found:
        try:
            if read_json(p).get("kind") == "blur-pairs":
                manifests.append(p)
        except (json.JSONDecodeError, OSError):
            continue
    return manifests
