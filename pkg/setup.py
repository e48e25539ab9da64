from setuptools import setup, find_packages

setup(
    name='quantkit',
    version='0.1.0',
    description='Simulated and integer quantization of small neural networks: PTQ, AdaRound, QAT',
    packages=find_packages(exclude=['tests', 'tests.*']),
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
    ],
    extras_require={
        'tests': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            'quantkit = quantkit.cli:main',
        ],
    },
    python_requires='>=3.7',
)
