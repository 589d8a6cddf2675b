import sys

# avoid having the cwd in the path
# see https://docs.python.org/3/tutorial/modules.html#the-module-search-path
if '' in sys.path:
    sys.path.remove('')

from typing import List

from htps.commands import ablate, evaluate, featurize, generate, train, transfer

TOOLS = {
    'generate': generate.main,
    'featurize': featurize.main,
    'train': train.main,
    'transfer': transfer.main,
    'evaluate': evaluate.main,
    'ablate': ablate.main,
}


def main(argv: List[str] = sys.argv[1:]) -> int:

    tool = argv[0] if len(argv) > 0 else None
    argv = argv[1:]

    if tool not in TOOLS:
        print(f'Usage: htps {"|".join(TOOLS)} --help', file=sys.stderr)
        return 1

    return TOOLS[tool](argv)


if __name__ == '__main__':
    sys.exit(main())
