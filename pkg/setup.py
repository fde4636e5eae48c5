from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension(
            "statefarm._spin",
            sources=["src/statefarm/_spin.c"],
            extra_compile_args=["-O2"],
        )
    ]
)
