from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("servtime")
except PackageNotFoundError:
    __version__ = "dev"
