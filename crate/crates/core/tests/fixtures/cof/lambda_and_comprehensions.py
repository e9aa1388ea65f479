import sys


def main():
    """Sort names by score, ties by name."""
    rows = [line.split() for line in sys.stdin.read().splitlines() if line.strip()]
    for name, score in ranked(rows):
        print(name, score)


def ranked(rows):
    """Sorted (name, score) pairs, best first."""
    key = lambda r: (-int(r[1]), r[0])
    return [(r[0], int(r[1])) for r in sorted(rows, key=key)]


main()
