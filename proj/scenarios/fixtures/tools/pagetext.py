import os
import sys
import urllib.request
from html.parser import HTMLParser

SKIP = {"script", "style", "title", "head"}


class TextCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.parts = []
        self.skipping = 0

    def handle_starttag(self, tag, attrs):
        if tag in SKIP:
            self.skipping += 1

    def handle_endtag(self, tag):
        if tag in SKIP and self.skipping:
            self.skipping -= 1

    def handle_data(self, data):
        if not self.skipping:
            self.parts.append(data)


def main():
    if len(sys.argv) != 4:
        print("usage: python3 pagetext.py <page path> <first line> <last line>")
        return 1
    url = os.environ["STUB_BASE_URL"] + sys.argv[1]
    first, last = int(sys.argv[2]), int(sys.argv[3])
    with urllib.request.urlopen(url, timeout=10) as response:
        html = response.read().decode("utf-8")
    collector = TextCollector()
    collector.feed(html)
    lines = [line.strip() for line in "".join(collector.parts).splitlines()]
    lines = [line for line in lines if line]
    for number in range(first, last + 1):
        if 1 <= number <= len(lines):
            print(f"{number}: {lines[number - 1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
