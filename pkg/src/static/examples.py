import os

EXAMPLES = {
    1: "example1.cfg",
    2: "example2.cfg",
}
LIMIT_CHECK = "limit_check.cfg"


def static_dir():
    """Directory holding the bundled configurations"""
    return os.path.dirname(os.path.abspath(__file__))


def example_config_path(number):
    """Path of the bundled configuration for a numbered example"""
    try:
        name = EXAMPLES[int(number)]
    except (KeyError, ValueError):
        raise ValueError(f"no bundled example {number!r}, choose from {sorted(EXAMPLES)}")
    return os.path.join(static_dir(), name)


def limit_check_config_path():
    return os.path.join(static_dir(), LIMIT_CHECK)
