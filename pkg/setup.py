"""Build the optional Cython recurrence kernel.

The package works without it; ``rdsmanifold.kernels`` falls back to the
pure-Python loops when the extension is missing.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rdsmanifold._recur",
                ["src/rdsmanifold/_recur.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
