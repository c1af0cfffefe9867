# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys

sys.path.insert(0, os.path.abspath('../..'))  # Project root directory (where pywadmm is)

# -- Project information -----------------------------------------------------

project = 'pywadmm'
copyright = '2026, pywadmm developers'
author = 'pywadmm developers'
release = '0.1.0'

# -- General configuration ---------------------------------------------------

extensions = [
    'myst_parser',
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx_rtd_theme',
    'sphinx.ext.napoleon',
]

autosummary_generate = True
autoclass_content = 'both'
html_show_sourcelink = False
autodoc_inherit_docstrings = True
add_module_names = False
napoleon_use_rtype = False
# pydantic models expose their fields; the validators add noise
autodoc_default_options = {
    'exclude-members': 'model_config, model_fields, model_computed_fields',
}

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store', '*test*', '*.log']

root_doc = 'index'

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'collapse_navigation': False,
    'navigation_depth': -1,
    'sticky_navigation': True,
    'titles_only': False,
}
