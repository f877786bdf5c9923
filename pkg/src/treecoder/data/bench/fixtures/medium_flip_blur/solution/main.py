import numpy as np
from PIL import Image

img = np.asarray(Image.open("input.png").convert("RGB")).astype(np.float64)[:, ::-1]
pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
h, w = img.shape[:2]
acc = sum(pad[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / 9.0
Image.fromarray(np.round(acc).astype(np.uint8)).save("smooth.png")
