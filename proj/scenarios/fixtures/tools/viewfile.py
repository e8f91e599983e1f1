import sys


def main():
    if len(sys.argv) != 2:
        print("usage: python3 viewfile.py <file>")
        return 1
    with open(sys.argv[1], encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            print(f"{number}: {line.rstrip(chr(10))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
