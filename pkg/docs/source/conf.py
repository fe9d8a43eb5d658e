# Sphinx configuration for the necroseg documentation
import os
import shutil
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", ".."))
sys.path.insert(0, ROOT)
from necroseg import __version__  # noqa: E402

# the repository README is the installation page
shutil.copyfile(os.path.join(ROOT, "README.md"), os.path.join(HERE, "README.md"))

project = "necroseg"
copyright = "2026, the necroseg developers"
author = "the necroseg developers"
release = __version__

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
    "sphinx_click.ext",
    "recommonmark",
]

source_suffix = [".rst", ".md"]
master_doc = "index"
exclude_patterns = []

html_theme = "sphinx_rtd_theme"
html_theme_options = {"collapse_navigation": True, "navigation_depth": 4}
