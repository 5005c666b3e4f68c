import graph_abstain.__main__  # noqa: F401
