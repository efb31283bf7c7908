from setuptools import setup, find_packages
import os
import sys
from dispersive_lab import __version__, __author__, __email__


def read_file(filename):
    """读取文件内容，支持在不同环境中查找文件"""
    paths_to_try = [
        # 方式1: 从当前脚本所在目录查找
        os.path.join(os.path.dirname(__file__), filename),
        # 方式2: 从当前工作目录查找
        os.path.join(os.getcwd(), filename),
        # 方式3: 从Python安装目录查找
        os.path.join(os.path.dirname(sys.executable), filename),
    ]

    for path in paths_to_try:
        if os.path.exists(path):
            with open(path, 'r', encoding='utf-8') as f:
                return f.read()

    print(f"警告: 无法读取文件 {filename}，将使用空内容。")
    return ""


def _share_dir(*parts):
    return os.path.join('share', *parts) if os.name == 'nt' else '/'.join(('share',) + parts)


# 示例配置安装到 share/dispersive_lab/config，config-example 命令会从那里读取
config_data = []
if os.path.exists('config'):
    config_files = [os.path.join('config', name) for name in sorted(os.listdir('config'))
                    if name.endswith(('.yaml', '.json'))]
    if config_files:
        config_data.append((_share_dir('dispersive_lab', 'config'), config_files))

setup(
    name="dispersive_lab",
    version=__version__,
    author=__author__,
    author_email=__email__,
    description="弱渐近平坦度规上半 Klein-Gordon 与三次 Dirac 方程的数值实验工具",
    long_description=read_file("readme.md"),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=('tests',)),
    include_package_data=True,
    package_data={
        '': ['*.md', '*.txt'],
    },
    data_files=[
        (_share_dir('doc', 'dispersive_lab'), ['readme.md', 'changelog.md']),
        (_share_dir('dispersive_lab'), ['changelog.md']),
    ] + config_data,
    install_requires=[
        "loguru>=0.7.0",
        "pyyaml>=6.0",
        "numpy>=1.24",
        "scipy>=1.10",
        "sympy>=1.12",
        "matplotlib>=3.7",
    ],
    entry_points={
        "console_scripts": [
            "dispersive_lab = dispersive_lab.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires='>=3.9',
)
