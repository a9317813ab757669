import setuptools

with open("requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("pytest")]

setuptools.setup(
    name="hwa_unetr",
    version="0.1.0",
    description="Desk-scale HWA-UNETR: multi-modal 3D lesion segmentation toolkit",
    packages=setuptools.find_packages(exclude=["tests", "examples"]),
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["hwa-unetr=hwa_unetr.cli:main"]},
    python_requires=">=3.8",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
