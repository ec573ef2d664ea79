import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "topopatch.cubical._kernel",
                ["src/topopatch/cubical/_kernel.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )

# The package works without the extension (pure-Python kernels are selected
# at import time), so a missing Cython is not fatal.
setup(ext_modules=ext_modules)
