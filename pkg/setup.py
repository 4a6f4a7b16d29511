"""Build script for the compiled kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); set PRECISEDMI_PURE=1 to skip compilation on
platforms without a C toolchain.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PRECISEDMI_PURE"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "precisedmi._kernels._cykernels",
                    ["src/precisedmi/_kernels/_cykernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
