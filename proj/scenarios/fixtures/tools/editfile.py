import sys


def main():
    if len(sys.argv) != 4:
        print("usage: python3 editfile.py <file> <line_number> <new_text>")
        return 1
    path, number, text = sys.argv[1], int(sys.argv[2]), sys.argv[3]
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    if number < 1 or number > len(lines):
        print(f"line {number} is out of range (file has {len(lines)} lines)")
        return 1
    lines[number - 1] = text + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)
    print(f"updated line {number} of {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
