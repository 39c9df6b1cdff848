import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "gvarnet._kernels._cy",
                ["src/gvarnet/_kernels/_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-Python kernels are selected at import time when the compiled
    # extension is unavailable.
    ext_modules = []

setup(ext_modules=ext_modules)
