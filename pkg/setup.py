#!/usr/bin/env python

"""The setup script."""

from setuptools import setup, find_packages

with open('README.md') as readme_file:
    readme = readme_file.read()

VERSION = '0.1.0'

requirements = [
    'Click>=8.0', 'tqdm>=4.60', "python-dotenv>=0.17.0", 'loguru>=0.7',
    'numpy>=1.21', 'Pillow>=9.1', 'scikit-learn>=1.0']
test_requirements = ['pytest>=3']

setup(
    author="Panotool contributors",
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
    description="Sliding-window place recognition of perspective queries against 360° panoramas",
    entry_points={
        'console_scripts': [
            'panotool=panotool.cli:main',
        ],
    },
    install_requires=requirements,
    license="MIT license",
    long_description=readme,
    long_description_content_type='text/markdown',
    include_package_data=True,
    keywords='panotool, visual place recognition, panorama',
    name='panotool',
    packages=find_packages(include=['panotool', 'panotool.*']),
    test_suite='tests',
    tests_require=test_requirements,
    version=VERSION,
    zip_safe=False,
)
