# Registers the built-in composite logic and serve routines.
from fissionserve import utils_apps  # noqa: F401
