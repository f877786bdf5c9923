import numpy as np
from PIL import Image

img = np.asarray(Image.open("input.png").convert("RGB"))
Image.fromarray(255 - img).save("output.png")
