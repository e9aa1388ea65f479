def helper(x):
    """Helper placed before the entry point (ordering violation)."""
    return x * 2


def main():
    """Entry point placed second."""
    print(helper(int(input())))


main()
