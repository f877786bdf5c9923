from PIL import Image

Image.open("input.png").convert("L").save("gray.png")
