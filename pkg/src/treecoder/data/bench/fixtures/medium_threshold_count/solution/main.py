import numpy as np
from PIL import Image

gray = np.asarray(Image.open("input.png").convert("L"))
mask = np.where(gray >= 128, 255, 0).astype(np.uint8)
Image.fromarray(mask).save("mask.png")
with open("count.txt", "w") as fh:
    fh.write(f"{int((mask == 255).sum())}\n")
