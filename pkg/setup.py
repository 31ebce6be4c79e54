from setuptools import setup, find_packages

setup(
    name="task-aware-moe",
    version="0.1.0",
    description="Task-aware mixture-of-experts with two-stage training on synthetic tasks",
    author="Your Name",
    author_email="your.email@example.com",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.22",
        "Pillow>=9.1",
    ],
    scripts=[
        "run_experiment.sh",
    ],
    entry_points={
        "console_scripts": [
            "task-moe=task_aware_moe.cli:main",
        ],
    },
    python_requires=">=3.8",
)
