from .bake import *
from .dataset import *
from .model import *
from .pruning import *
from .trainer import *
