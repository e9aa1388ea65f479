def main():
    """Uses a nested closure, which stays inside this step."""
    def inner(x):
        return x + 1

    class Local:
        def method(self):
            return 2

    print(inner(1), Local().method(), outer_helper())


def outer_helper():
    """Has its own nested def."""
    def deeper():
        def deepest():
            return 3
        return deepest()
    return deeper()


main()
