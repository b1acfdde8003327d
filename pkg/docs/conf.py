# Sphinx configuration for the servtime docs.
# Build with: uv run --extra docs sphinx-build docs docs/_build/html

from servtime._version import __version__

# -- Project information -----------------------------------------------------

project = "Servtime"
copyright = "2025, stabldev"
author = "stabldev"
release = __version__
version = ".".join(__version__.split(".")[:2])

# -- General configuration ---------------------------------------------------

extensions = ["myst_parser", "sphinx_copybutton", "qiskit_sphinx_theme"]

source_suffix = {".md": "markdown"}
root_doc = "index"

# contributing.md links to sections of usage.md
myst_heading_anchors = 3

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

# -- Options for HTML output -------------------------------------------------

html_theme = "qiskit-ecosystem"
html_title = f"servtime {release}"
html_theme_options = {
    "source_repository": "https://github.com/stabldev/servtime",
    "source_branch": "main",
    "source_directory": "docs/",
}
