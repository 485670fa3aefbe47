"""Build script: compiles the optional accelerator extension when Cython and a
C++ compiler are available, otherwise installs the pure-numpy package."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("GRIDFORGE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "gridforge._core",
                    ["src/gridforge/_core.pyx"],
                    language="c++",
                    extra_compile_args=["-O3", "-std=c++11"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
