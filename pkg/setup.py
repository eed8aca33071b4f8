"""Build script for the optional compiled kernels.

The package works without the extension (a pure-numpy backend is selected
at import time), so a missing compiler or Cython only costs speed.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "schwarzopt.kernels._compiled",
                ["src/schwarzopt/kernels/_compiled.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError as exc:  # pragma: no cover - exercised only in bare envs
    print(f"skipping compiled kernels ({exc}); the pure-python backend will be used")

setup(ext_modules=ext_modules)
