from setuptools import setup


setup(
    name='ap2-norm',
    version='0.1.0',
    description='Normalization by analytic moment propagation, with conversions and verification oracles',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    packages=['model', 'module'],
    py_modules=['run'],
    python_requires='>=3.9',
    install_requires=[
        'torch>=2.2',
        'numpy',
        'scipy',
        'structlog',
        'transformers'
    ],
    extras_require={
        'test': ['pytest']
    },
    entry_points={
        'console_scripts': ['ap2 = run:main']
    }
)
