from setuptools import setup

with open("version.txt") as file:
    version = file.read().strip()

with open("requirements.txt") as file:
    requirements = [line.strip() for line in file if line.strip() and not line.startswith("#")]
    requirements = requirements[:requirements.index("pre-commit")] if "pre-commit" in requirements else requirements

setup(
    name="laddergym",
    version=version,
    description="Planar quadruped ladder-climbing simulator with constrained teacher training and student distillation",
    package_dir={"": "python"},
    py_modules=["checkpoint", "cli", "config", "errors", "eval_harness", "ladder_env", "ladder_terrain", "models",
                "nn", "obs_reward", "planar_sim", "policies", "policy_learn", "util", "visualization"],
    python_requires=">=3.9",
    install_requires=requirements,
    entry_points={"console_scripts": ["laddergym=cli:main"]},
)
