"""Writes the small activity demo: six subjects, five channels, three classes."""

import csv
import math
import random
from pathlib import Path

RATE = 20
SECONDS = 90
CLASSES = ["sit", "walk", "run"]
FREQ = {"sit": 0.0, "walk": 1.8, "run": 2.9}
AMP = {"sit": 0.05, "walk": 0.6, "run": 1.2}

out = Path(__file__).parent / "data"
out.mkdir(exist_ok=True)
for subject in range(1, 7):
    rng = random.Random(subject)
    gain = 1 + 0.2 * rng.uniform(-1, 1)
    rows = []
    label = rng.choice(CLASSES)
    for t in range(RATE * SECONDS):
        if t % (RATE * 10) == 0:
            label = rng.choice(CLASSES)
        sec = t / RATE
        w = 2 * math.pi * FREQ[label] * sec
        a = gain * AMP[label]
        row = {
            "time": f"{sec:.2f}",
            "chest_x": a * math.sin(w) + rng.gauss(0, 0.1),
            "chest_y": 0.5 * a * math.cos(w) + rng.gauss(0, 0.1),
            "ankle_x": 1.5 * a * math.sin(w + 0.5) + rng.gauss(0, 0.15),
            "wrist_x": 0.4 * a * math.sin(w + 1.0) + rng.gauss(0, 0.4),
            "wrist_y": 0.3 * a * math.cos(w + 1.0) + rng.gauss(0, 0.4),
            "label": label,
        }
        for k in ("chest_x", "chest_y", "ankle_x", "wrist_x", "wrist_y"):
            row[k] = f"{row[k]:.4f}"
        if rng.random() < 0.002:
            row["wrist_x"] = "NaN"
        rows.append(row)
    with open(out / f"s{subject:02d}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
