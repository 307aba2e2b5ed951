#!/usr/bin/env python3
"""
Setup script for the Continual Distillation Lab
"""

from setuptools import setup, find_packages

# Read the README file
def read_readme():
    with open("README.md", "r", encoding="utf-8") as f:
        return f.read()

# Read requirements
def read_requirements():
    with open("requirements-github.txt", "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name="continual-distillation-lab",
    version="1.0.0",
    author="Continual Distillation Lab Contributors",
    description="Prompt-based continual learning with teacher-to-student knowledge distillation on a numpy autodiff core",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["examples", "examples.*"]),
    py_modules=["main"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={
        "console_scripts": [
            "cdl=main:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
    keywords="continual learning knowledge distillation prompt tuning vision transformer",
)
