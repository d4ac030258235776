from .attention import *
from .discriminator import *
from .generator import *
from .trainer import *
