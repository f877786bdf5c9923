# Custom comparator: edges must match within 2 grey levels per pixel.
import sys

import numpy as np
from PIL import Image

a = np.asarray(Image.open("generated/edges.png")).astype(int)
b = np.asarray(Image.open("expected/edges.png")).astype(int)
if a.shape != b.shape:
    print(f"shape {a.shape} vs {b.shape}")
    sys.exit(1)
worst = int(np.abs(a - b).max())
print(f"max pixel difference {worst}")
sys.exit(0 if worst <= 2 else 1)
