"""Reference encoder child process speaking the framed JSON protocol on stdio.

Serves the hash-seeded stub encoder.  A real multilingual encoder can be put
behind the same protocol by replacing ``StubEncoder`` with any object that
has an ``encode(texts)`` method.
"""
from .embed import StubEncoder, serve_stdio


def main():
    serve_stdio(StubEncoder())


if __name__ == "__main__":
    main()
