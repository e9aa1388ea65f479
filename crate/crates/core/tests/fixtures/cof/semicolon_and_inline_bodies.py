def main():
    """Inline bodies and semicolons."""
    x = int(input()); print(square(x), cube(x))


def square(x): return x * x


def cube(x): "Cube."; return x * x * x


main()
