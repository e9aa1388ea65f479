def main():
    """Print the product of two integers."""
    a, b = map(int, input().split())
    print(a * b)


main()
