"""Bundled example data.

The growth-study data (108 orthodontic distance measurements of 27
children at ages 8, 10, 12 and 14) ships with the package; ``sex`` is
categorical and ``female`` a precoded 0/1 dummy.
"""

from importlib import resources
from pathlib import Path


def orthodont_path() -> Path:
    """Filesystem path of the bundled growth-study CSV."""
    return Path(resources.files("boostlmm") / "data" / "orthodont.csv")


def load_orthodont():
    """The bundled data as a :class:`~boostlmm.model.Dataset`
    (female dummy + age, random intercept)."""
    from .dataio import ingest_csv

    return ingest_csv(
        orthodont_path(), response="distance", cluster="subject",
        fixed=["female", "age"],
    )
