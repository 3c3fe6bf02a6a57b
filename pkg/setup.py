from setuptools import setup, Extension
from Cython.Build import cythonize
import numpy as np

ext = Extension(
    "panobit.engine.kernels._conv_native",
    ["src/panobit/engine/kernels/_conv_native.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3", "-fopenmp", "-march=native", "-ffast-math"],
    extra_link_args=["-fopenmp"],
)

setup(
    ext_modules=cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
