import os
import sys
import urllib.request
from html.parser import HTMLParser


class LinkCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.links = set()

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value:
                    self.links.add(value)


def main():
    if len(sys.argv) != 2:
        print("usage: python3 links.py <page path>")
        return 1
    url = os.environ["STUB_BASE_URL"] + sys.argv[1]
    with urllib.request.urlopen(url, timeout=10) as response:
        html = response.read().decode("utf-8")
    collector = LinkCollector()
    collector.feed(html)
    for link in sorted(collector.links):
        print(link)
    return 0


if __name__ == "__main__":
    sys.exit(main())
