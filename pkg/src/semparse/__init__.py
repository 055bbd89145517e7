"""Semantic parsing from denotations: lambda DCS, chart parsing, log-linear learning."""

from importlib import resources

__version__ = "0.1.0"


def data_path(name: str):
    """Path to a bundled grammar or KB file."""
    return resources.files(__name__).joinpath("data", name)
