"""Synthetic colored-shape dataset so the full pipeline runs offline."""

from __future__ import annotations

import random
from pathlib import Path

from PIL import Image, ImageDraw

# (class name, shape, fill color)
TOY_CLASSES = [
    ("blue_square", "square", (40, 70, 200)),
    ("green_circle", "circle", (40, 180, 70)),
    ("red_triangle", "triangle", (210, 50, 50)),
    ("yellow_cross", "cross", (220, 200, 40)),
]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: tuple, color: tuple):
    x0, y0, x1, y1 = box
    if shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "triangle":
        draw.polygon([((x0 + x1) // 2, y0), (x0, y1), (x1, y1)], fill=color)
    elif shape == "cross":
        w = max(2, (x1 - x0) // 3)
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        draw.rectangle((cx - w // 2, y0, cx + w // 2, y1), fill=color)
        draw.rectangle((x0, cy - w // 2, x1, cy + w // 2), fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def generate_toy_dataset(root: str | Path, per_class: int = 32, side: int = 64,
                         seed: int = 0) -> Path:
    """Write a 4-class directory-of-classes corpus of colored shapes.

    Images alternate between PNG and JPEG so both loaders get exercised.
    """
    root = Path(root)
    rng = random.Random(seed)
    for name, shape, color in TOY_CLASSES:
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            bg = tuple(rng.randint(180, 255) for _ in range(3))
            img = Image.new("RGB", (side, side), bg)
            draw = ImageDraw.Draw(img)
            size = rng.randint(side // 3, side // 2)
            x0 = rng.randint(2, side - size - 2)
            y0 = rng.randint(2, side - size - 2)
            jitter = tuple(
                min(255, max(0, c + rng.randint(-25, 25))) for c in color
            )
            _draw_shape(draw, shape, (x0, y0, x0 + size, y0 + size), jitter)
            ext = "png" if i % 2 == 0 else "jpg"
            img.save(class_dir / f"{name}_{i:03d}.{ext}")
    return root
