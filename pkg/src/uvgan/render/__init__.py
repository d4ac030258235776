from .baking import *
from .rasterizer import *
from .shading import *
