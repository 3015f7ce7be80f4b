from setuptools import setup, find_packages

setup(
    name="dag-affordance",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    py_modules=["config", "run"],
    install_requires=[
        "torch",
        "numpy",
        "pillow",
        "scikit-learn",
        "tqdm",
        "pydantic>=2",
        "python-dotenv",
        "flask",
        "flask-wtf"
    ],
    extras_require={
        'dev': [
            'pytest',
            'flake8',
            'mypy'
        ],
        'serve': [
            'gunicorn'
        ]
    },
    entry_points={
        'console_scripts': [
            'dag=dag.cli:main'
        ]
    }
)
