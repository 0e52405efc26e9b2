"""Tiny synthetic image+dialog corpus for smoke runs and memorization checks."""

from __future__ import annotations

import numpy as np

from .data import Conversation

COLORS = {"red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.1, 0.2, 0.9),
          "yellow": (0.9, 0.9, 0.1), "white": (0.95, 0.95, 0.95), "purple": (0.6, 0.1, 0.7),
          "orange": (1.0, 0.55, 0.0), "gray": (0.5, 0.5, 0.5)}
OBJECTS = ("cat", "dog", "ball", "cup", "kite", "boat", "lamp", "tree")
PLACES = ("grass", "sand", "a table", "water", "snow", "a road", "a bed", "a roof")


def make_image(color: tuple[float, float, float], rng: np.random.Generator, size: int = 32,
               cell: int = 8) -> np.ndarray:
    """Noisy background with one solid block of ``color`` at a random cell."""
    img = rng.uniform(0.0, 0.3, (size, size, 3))
    n = size // cell
    r, c = rng.integers(0, n, 2)
    img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = color
    return np.clip(img, 0.0, 1.0)


def make_corpus(n: int = 8, seed: int = 0, turns: int = 2, size: int = 32) -> tuple[list[Conversation], dict]:
    """``n`` conversations with inline-free image ids and a dict id -> pixels.

    Turn 1 asks for a description; later turns ask about colour, place and
    object.
    """
    rng = np.random.default_rng(seed)
    names = list(COLORS)
    convs, images = [], {}
    for i in range(n):
        color, obj, place = names[i % 8], OBJECTS[(i * 3) % 8], PLACES[(i * 5) % 8]
        cid = f"syn-{i:03d}"
        images[cid] = make_image(COLORS[color], rng, size)
        qa = [("describe the image.", f"a {color} {obj} on {place}."),
              (f"what color is the {obj}?", f"{color}."),
              (f"where is the {obj}?", f"on {place}."),
              (f"what is on {place}?", f"a {obj}.")]
        convs.append(Conversation(cid, f"{cid}.npy", qa[:turns]))
    return convs, images
