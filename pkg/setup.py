"""Builds the optional compiled kernel core.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); set VISFLOW_NO_EXT=1 to skip compilation.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("VISFLOW_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "visflow.kernels._core",
                    ["src/visflow/kernels/_core.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
