""" Setup file """
import os

from setuptools import find_packages, setup

HERE = os.path.abspath(os.path.dirname(__file__))
README = open(os.path.join(HERE, "README.rst")).read()

REQUIREMENTS_TEST = open(os.path.join(HERE, "requirements_test.txt")).readlines()
REQUIREMENTS = [
    "boto3>=1.7.0",
    "jinja2",
    "numpy>=1.20",
    "Pillow>=8",
    # DottedNameResolver and asbool for the pluggable backends
    "pyramid>=2",
    "torch>=1.13",
]

EXTRAS = {"test": REQUIREMENTS_TEST}


if __name__ == "__main__":
    setup(
        name="crossmodal-seg",
        version="0.1.0",
        description="Referring image segmentation with mutual-guidance alignment",
        long_description=README,
        classifiers=[
            "Programming Language :: Python",
            "Programming Language :: Python :: 3",
            "Programming Language :: Python :: 3.8",
            "Programming Language :: Python :: 3.9",
            "Programming Language :: Python :: 3.10",
            "Development Status :: 3 - Alpha",
            "Intended Audience :: Science/Research",
            "License :: OSI Approved :: MIT License",
            "Topic :: Scientific/Engineering :: Image Recognition",
        ],
        license="MIT",
        keywords="referring segmentation vision language pytorch",
        platforms="any",
        zip_safe=False,
        python_requires=">=3.8",
        include_package_data=True,
        packages=find_packages(exclude=("tests",)),
        package_data={
            "crossmodal_seg": ["templates/*.jinja2", "schema/*.json"],
        },
        entry_points={
            "console_scripts": [
                "crossmodal-seg = crossmodal_seg.scripts:main",
                "cms-train = crossmodal_seg.scripts:train",
                "cms-evaluate = crossmodal_seg.scripts:evaluate",
                "cms-predict = crossmodal_seg.scripts:predict",
                "cms-make-synthetic = crossmodal_seg.scripts:make_synthetic",
                "cms-ablate = crossmodal_seg.scripts:ablate",
                "cms-compare-decoders = crossmodal_seg.scripts:compare_decoders",
            ],
        },
        install_requires=REQUIREMENTS,
        tests_require=REQUIREMENTS + REQUIREMENTS_TEST,
        test_suite="tests",
        extras_require=EXTRAS,
    )
