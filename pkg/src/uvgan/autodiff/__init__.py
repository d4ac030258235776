from .checkpoint import *
from .gradcheck import *
from .nn import *
from .ops import *
from .optim import *
from .tensor import *
