"""Build script: compiles the transducer-loss Cython kernel when possible.

The package works without the extension (a pure numpy fallback is selected
at import time), so a failed compile degrades to a warning, not an error.
"""

import sys

import numpy as np
from setuptools import Extension, setup


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        sys.stderr.write("warning: Cython unavailable, building without the "
                         "compiled transducer kernel\n")
        return []
    exts = [
        Extension(
            "xdk.kernels._transducer_cy",
            ["src/xdk/kernels/_transducer_cy.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
    ]
    return cythonize(
        exts,
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )


setup(ext_modules=_extensions())
