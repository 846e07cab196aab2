# Configuration file for the Sphinx documentation builder.

project = 'egofuse'
copyright = '2026, egofuse developers'
author = 'egofuse developers'
release = '0.1.0'
version = '0.1.0'

html_theme = 'sphinx_rtd_theme'

extensions = [
    'sphinx.ext.viewcode',
    'autoapi.extension',
]

autoapi_dirs = ['../egofuse']
