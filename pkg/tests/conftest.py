"""Shared pytest options."""

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--run-acceptance",
        action="store_true",
        default=False,
        help="Run the desk-scale reproduction tests",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-acceptance"):
        return
    skip = pytest.mark.skip(reason="needs --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)
