def main():
    print(twice(int(input())))


def twice(x):
    # a comment is not a docstring
    return 2 * x


main()
