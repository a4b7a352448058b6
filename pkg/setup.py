import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the package still works through the numpy fallback
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("crossfuse._kernels", ["src/crossfuse/_kernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                   libraries=["mvec", "m"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
