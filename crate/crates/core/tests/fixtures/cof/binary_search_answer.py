def main():
    """
    Binary search the minimum capacity that ships all packages within d days.
    """
    weights = list(map(int, input().split()))
    d = int(input())
    print(smallest_feasible(weights, d))


def feasible(weights, d, cap):
    """True if packing greedily with capacity cap needs at most d days."""
    days, load = 1, 0
    for w in weights:
        if load + w > cap:
            days += 1
            load = 0
        load += w
    return days <= d


def smallest_feasible(weights, d):
    """Lowest capacity for which feasible() holds."""
    lo, hi = max(weights), sum(weights)
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(weights, d, mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


if __name__ == "__main__":
    main()
