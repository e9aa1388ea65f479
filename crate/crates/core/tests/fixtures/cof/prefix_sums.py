import sys
input = sys.stdin.readline


def solve():
    """Answer range-sum queries with a prefix array."""
    n, q = map(int, input().split())
    a = list(map(int, input().split()))
    pre = prefix_sums(a)
    out = []
    for _ in range(q):
        l, r = map(int, input().split())
        out.append(range_sum(pre, l, r))
    print("\n".join(map(str, out)))


def prefix_sums(a):
    """pre[i] = a[0] + ... + a[i-1]."""
    pre = [0]
    for x in a:
        pre.append(pre[-1] + x)
    return pre


def range_sum(pre, l, r):
    """Sum of a[l-1..r-1], 1-based inclusive."""
    return pre[r] - pre[l - 1]


solve()
