"""Multi-mode whispering-gallery ESR analysis toolkit."""
__version__ = "0.1.0"
