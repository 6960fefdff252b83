from .basics import *
from .constants import *
