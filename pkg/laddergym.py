import json
import os
import sys


# function to create the full path for files
def create_filepath(filename):
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), filename)


def add_python_path():
    with open(create_filepath("config.json")) as file:
        python_path = json.load(file).get("python_path", "./python")
    sys.path.insert(0, create_filepath(python_path))


if __name__ == "__main__":
    add_python_path()
    from cli import main

    sys.exit(main())
