from typing import List


class Solution:
    """LeetCode-style wrapper."""

    def maxProfit(self, prices: List[int]) -> int:
        """Best single buy/sell profit."""
        return max(0, max(self._best_after(prices)))

    @staticmethod
    def _best_after(prices):
        """Profit if selling at each day given the best earlier buy."""
        best_buy = float("inf")
        out = []
        for p in prices:
            best_buy = min(best_buy, p)
            out.append(p - best_buy)
        return out
