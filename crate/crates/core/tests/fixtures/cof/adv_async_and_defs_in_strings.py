import asyncio

DOC = '''
def fake():
    pass
'''


async def main():
    """Async entry."""
    print(await fetch(DOC))


async def fetch(x):
    """Returns the length; 'def' in a string is ignored."""
    await asyncio.sleep(0)
    return len(x)


asyncio.run(main())
