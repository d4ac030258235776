from .autodiff import *
from .config import *
from .evaluation import *
from .exceptions import *
from .gan import *
from .geometry import *
from .losses import *
from .recon import *
from .render import *
from .synth import *
from .utils import *

try:
    from . import __version__ as version_meta  # type: ignore
except ImportError:

    class __VersionMeta:
        __version__ = "0.0.dev0+gFFFFFF"
        __version_tuple__ = (0, 0, "dev0", "gFFFFFF")

    version_meta = __VersionMeta()

__license__ = "GNU LGPLv3"
__title__ = "uv-gan"
__description__ = "Textured mesh reconstruction from image sequences and aligned texture-map GANs."
