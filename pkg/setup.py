import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off: the fallback backend must stay bit-identical to this
# extension, so fused multiply-adds are disabled.
extensions = [
    Extension(
        "mx4train._backend._native",
        ["src/mx4train/_backend/_native.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
