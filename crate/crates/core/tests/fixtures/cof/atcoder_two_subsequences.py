def main():
    """
    Determines whether there are at least two distinct subsequences of A that equal B.
    The approach computes the earliest and latest possible index matches of B as a subsequence of A.
    If B cannot be matched at all, the answer is "No".
    If any position in the earliest match is strictly earlier than the corresponding position in the latest match, then multiple distinct subsequences exist.
    """
    input = sys.stdin.readline
    N, M = map(int, input().split())
    A = list(map(int, input().split()))
    B = list(map(int, input().split()))

    L = find_earliest_positions(A, B)
    if L is None:
        print("No")
        return

    R = find_latest_positions(A, B)
    for k in range(M):
        if L[k] < R[k]:
            print("Yes")
            return

    print("No")


def find_earliest_positions(A, B):
    """
    Greedily matches B as a subsequence of A using the earliest possible indices.
    Returns a list L where L[k] is the index in A matching B[k], or None if B
    is not a subsequence of A.
    """
    N, M = len(A), len(B)
    L = [0] * M
    j = 0
    for k in range(M):
        while j < N and A[j] != B[k]:
            j += 1
        if j == N:
            return None
        L[k] = j
        j += 1
    return L


def find_latest_positions(A, B):
    """
    Greedily matches B as a subsequence of A using the latest possible indices.
    Returns a list R where R[k] is the index in A matching B[k]. Assumes that
    B is a subsequence of A.
    """
    N, M = len(A), len(B)
    R = [0] * M
    j = N - 1
    for k in range(M - 1, -1, -1):
        while j >= 0 and A[j] != B[k]:
            j -= 1
        R[k] = j
        j -= 1
    return R
