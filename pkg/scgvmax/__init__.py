from mpmath import mp
mp.dps = 30

__version__ = "0.1.0"
