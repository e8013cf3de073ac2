from setuptools import setup

setup(
    name="kamsort-toolkit",
    version="0.1.0",
    py_modules=[
        "errors",
        "geometry",
        "kalman",
        "association",
        "mot_io",
        "tracker",
        "metrics",
        "simulate",
        "tracking_pipeline",
    ],
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "PyYAML>=6.0",
        "tqdm>=4.65.0",
        "typing-extensions>=4.7.0",
    ],
    entry_points={
        "console_scripts": [
            "kamsort=tracking_pipeline:main",
        ],
    },
    python_requires=">=3.9",
)
