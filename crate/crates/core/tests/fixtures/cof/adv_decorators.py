import functools


def main():
    """Memoised Fibonacci."""
    print(fib(30), describe())


@functools.lru_cache(maxsize=None)
def fib(n):
    """n-th Fibonacci number."""
    return n if n < 2 else fib(n - 1) + fib(n - 2)


@staticmethod
@functools.wraps(print)
def describe(
):
    """Stacked decorators and a split signature."""
    return "fib"


main()
