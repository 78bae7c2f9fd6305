import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

requires = [
    'numpy>=1.19',
    'pandas>=1.0.5',
    'psutil>=5.7.2',
    'fastapi>=0.95',
    'uvicorn>=0.20',
    'requests>=2.25',
    'PyYAML>=5.4',
]

setuptools.setup(
    name='servekit',
    version='0.0.1',
    description="Versioned model serving with hot-swap, batching and a "
                "small fleet control plane",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['tests', 'benchmarks']),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Development Status :: 1 - Planning",
    ],
    install_requires=requires,
    extras_require={'test': ['httpx>=0.23']},
    entry_points={
        'console_scripts': [
            'servekit-server=servekit.server:main',
            'fleetctl=servekit.fleet.cli:main',
        ],
    },
    python_requires='>=3.8',
)
