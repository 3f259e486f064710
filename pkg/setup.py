import os
import lesiontl
from setuptools import setup, find_packages


def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname), encoding='utf-8').read()


setup(
    name="lesiontl",
    version=lesiontl.version,
    description="Transfer learning experiments for melanoma vs benign skin lesion classification.",
    license="MIT",
    keywords="melanoma dermoscopy transfer-learning vgg alexnet pytorch",
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.9',
    install_requires=[
        'coloredlogs>=15.0',
        'humanfriendly>=10.0',
        'matplotlib>=3.5',
        'numpy>=1.22',
        'pandas>=1.5',
        'Pillow>=9.1',
        'scikit-learn>=1.1',
        'torch>=2.0',
        'torchvision>=0.15',
    ],
    extras_require={
        'test': ['pytest>=7.0'],
    },
    include_package_data=True,
    zip_safe=False,
    entry_points={
        'console_scripts': ['lesiontl=lesiontl.cli:main'],
    },
    long_description=read('README.md'),
    long_description_content_type='text/markdown',
    classifiers=[
        "Development Status :: 4 - Beta",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
    ],
)
