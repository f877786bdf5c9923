import numpy as np
from PIL import Image

g = np.asarray(Image.open("input.png").convert("L")).astype(np.float64)
p = np.pad(g, 1, mode="edge")
h, w = g.shape
win = lambda dy, dx: p[dy:dy + h, dx:dx + w]
gx = (win(0, 2) + 2 * win(1, 2) + win(2, 2)) - (win(0, 0) + 2 * win(1, 0) + win(2, 0))
gy = (win(2, 0) + 2 * win(2, 1) + win(2, 2)) - (win(0, 0) + 2 * win(0, 1) + win(0, 2))
mag = np.hypot(gx, gy)
peak = mag.max()
out = np.zeros_like(mag) if peak == 0 else mag * 255.0 / peak
Image.fromarray(np.round(out).astype(np.uint8)).save("edges.png")
