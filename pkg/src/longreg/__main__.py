"""Allow running the command line interface as `python -m longreg`."""

from .cli import main

if __name__ == "__main__":
    main()
