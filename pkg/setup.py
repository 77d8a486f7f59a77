import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext_modules = cythonize(
    [Extension("hqvae._kernels", ["src/hqvae/_kernels.pyx"], include_dirs=[np.get_include()],
               extra_compile_args=["-O3"])],
    compiler_directives={"language_level": 3},
)

setup(ext_modules=ext_modules)
