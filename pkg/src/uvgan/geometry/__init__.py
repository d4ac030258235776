from .camera import *
from .mesh import *
