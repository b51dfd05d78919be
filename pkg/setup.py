import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: without Cython the package falls back to
# loopsr._kernels_py at import time.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("LSR_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "loopsr._kernels",
                ["src/loopsr/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
