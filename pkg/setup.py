"""Build script for the compiled solver core.

Set SONOTRACE_NO_EXT=1 to skip the extension; the package then runs on the
pure-NumPy kernel backend.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SONOTRACE_NO_EXT"):
    import numpy as np
    from Cython.Build import cythonize

    directives = {
        "language_level": "3",
        "boundscheck": False,
        "wraparound": False,
        "cdivision": True,
        "initializedcheck": False,
    }
    ext_modules = cythonize(
        [
            Extension(
                "sonotrace._kernels.core",
                ["src/sonotrace/_kernels/core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # -ffp-contract=off keeps the C arithmetic bit-compatible with
                # the NumPy backend (no FMA contraction).
                extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives=directives,
    )

setup(ext_modules=ext_modules)
