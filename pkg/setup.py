#!/usr/bin/env python3
"""
Setup script for mlmi-bench package
"""
from setuptools import setup
from pathlib import Path

# Read README
readme_file = Path(__file__).parent / 'README.md'
long_description = readme_file.read_text(encoding='utf-8') if readme_file.exists() else ''


setup(
    name='mlmi-bench',
    version='0.1.0',
    description='Simulation harness comparing multilevel multiple imputation methods for longitudinal cohort data',
    long_description=long_description,
    long_description_content_type='text/markdown',
    python_requires='>=3.8',
    packages=['mlmi_bench', 'mlmi_bench.lib'],
    package_dir={
        'mlmi_bench': 'mlmi_bench',
        'mlmi_bench.lib': 'mlmi_bench/lib',
    },
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
        'pandas>=1.5',
        'matplotlib>=3.5',
    ],
    extras_require={
        'tests': ['pytest>=7.0'],
    },
    entry_points={
        'console_scripts': [
            'mlmi-bench=mlmi_bench.cli:main',
        ],
    },
    include_package_data=True,
    package_data={
        'mlmi_bench': [
            'configs/*.ini',
            'scripts/*.sh',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Mathematics',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
    ],
)
