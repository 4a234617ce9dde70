"""Layer-wise probing of lexical tone and onset consonants in speech encoders."""

__version__ = "0.1.0"
