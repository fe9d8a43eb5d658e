from setuptools import setup, find_packages
import codecs
import os.path


def read(rel_path):
    here = os.path.abspath(os.path.dirname(__file__))
    with codecs.open(os.path.join(here, rel_path), "r") as fp:
        return fp.read()


def get_version(rel_path):
    for line in read(rel_path).splitlines():
        if line.startswith("__version__"):
            delim = '"' if '"' in line else "'"
            return line.split(delim)[1]
    else:
        raise RuntimeError("Unable to find version string.")


setup(
    name="necroseg",
    version=get_version("necroseg/__init__.py"),
    description="necroseg: tumor-necrosis segmentation with a LoRA patch classifier and a diffusion refiner",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    license="GNU-GPLv3",
    python_requires=">=3.10",
    install_requires=[
        "click",
        "pandas",
        "tabulate",
        "jsonschema",
        "rich",
        "numpy",
        "colorlog",
        "torch",
        "scipy",
        "Pillow",
        "matplotlib",
        "PyYAML",
    ],
    packages=find_packages(exclude=["tests"]),
    entry_points={"console_scripts": ["necroseg = necroseg.cli:cli"]},
    package_dir={"necroseg": "necroseg"},
    package_data={
        "necroseg.assets": ["config_schema.json", "manifest_schema.json", "default_config.yaml"]
    },
)
