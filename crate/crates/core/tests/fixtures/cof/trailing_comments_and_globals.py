# Solution header comment
import math

LIMIT = 10 ** 6  # module constant


def main():
    """Print sqrt of the input, capped."""
    x = min(int(input()), LIMIT)
    print(helper(x))

# a comment between functions


def helper(x):
    """Integer square root."""
    return math.isqrt(x)


# trailing comment
main()
