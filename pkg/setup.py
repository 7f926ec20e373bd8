import os
import sys

from setuptools import Extension, setup


def extensions():
    if os.environ.get("WMRB_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        print("Cython/numpy unavailable: installing pure-Python kernels only", file=sys.stderr)
        return []

    openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
    ext = Extension(
        "wmrb._kernels._fast",
        ["src/wmrb/_kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"] + openmp,
        extra_link_args=openmp,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
