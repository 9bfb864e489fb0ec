from setuptools import setup, find_packages

setup(
    name="tcc-pyramid",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy==1.26.4",
        "fastapi==0.109.1",
        "uvicorn==0.27.0",
        "pydantic==2.5.3",
        "pydantic-settings==2.1.0",
        "jinja2==3.1.3",
        "tomli>=1.1.0; python_version < '3.11'",
    ],
    extras_require={
        "test": [
            "pytest==7.4.3",
            "pytest-asyncio==0.23.4",
            "pytest-cov==4.1.0",
            "pytest-mock==3.12.0",
            "pytest-xdist==3.5.0",
            "httpx==0.26.0",
        ],
        "dev": [
            "black==24.1.1",
            "isort==5.13.2",
            "flake8==7.0.0",
            "mypy==1.8.0",
        ],
    },
    entry_points={
        "console_scripts": ["tcc=app.cli:main"],
    },
    package_data={
        "": ["*.pyi", "py.typed"],
        "app": ["templates/*.jinja2"],
    },
    python_requires=">=3.10",
)
