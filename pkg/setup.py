"""Build script: compiles the Newton power-flow kernel when Cython and a C
compiler are available.  The package falls back to the pure numpy kernel at
import time if the extension is missing, so a failed extension build is not
fatal."""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "cellgrid._newton",
                ["src/cellgrid/_newton.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
