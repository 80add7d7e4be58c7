import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("saltbin._kernels", ["src/saltbin/_kernels.pyx"],
                   include_dirs=[np.get_include()], optional=True,
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
