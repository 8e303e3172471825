"""Build script: compiles the optional span-scanner extension.

The package works without the extension (a pure-Python scanner is selected at
import time), so a failed compile must not fail the install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "lpsynth._spanscan",
                sources=["src/lpsynth/_spanscan.pyx"],
                optional=True,
            )
        ],
        language_level="3",
    )
except ImportError:
    # No Cython available: install pure-Python only.
    ext_modules = []

setup(ext_modules=ext_modules)
