from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("beetle-pipeline/requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="beetle-pipeline",
    version="0.1.0",
    author="Beetle Pipeline Team",
    author_email="",
    description="Batch detection, cropping and part segmentation of beetles in specimen tray images",
    long_description=long_description,
    long_description_content_type="text/markdown",
    package_dir={"": "beetle-pipeline"},
    packages=["src"],
    py_modules=["main"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "Topic :: Scientific/Engineering :: Bio-Informatics",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.0.0",
        ],
        "reference": [
            "torch>=2.1",
            "transformers>=4.40",
        ],
    },
    entry_points={
        "console_scripts": [
            "beetle-pipeline=main:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
