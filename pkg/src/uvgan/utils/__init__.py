from .csvlog import *
from .images import *
from .jsonio import *
from .lib import *
from .unblocking import *
