import numpy as np
from PIL import Image

g = np.asarray(Image.open("input.png").convert("L"))
hist = np.bincount(g.ravel(), minlength=256)
cdf = hist.cumsum()
lo = cdf[cdf > 0][0]
lut = np.round((cdf - lo) * 255.0 / max(cdf[-1] - lo, 1)).clip(0, 255).astype(np.uint8)
Image.fromarray(lut[g]).save("equalized.png")
