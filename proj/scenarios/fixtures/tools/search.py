import json
import os
import sys
import urllib.error
import urllib.parse
import urllib.request

CONFIG = "search_config.json"


def main():
    if len(sys.argv) != 2:
        print("usage: python3 search.py <query>")
        return 1
    if not os.path.exists(CONFIG):
        print(f"error: {CONFIG} not found; it needs an api_key and a cx (search engine id)")
        return 1
    with open(CONFIG, encoding="utf-8") as f:
        config = json.load(f)
    params = urllib.parse.urlencode({"key": config["api_key"], "cx": config["cx"], "q": sys.argv[1]})
    url = os.environ["STUB_BASE_URL"] + "/customsearch/v1?" + params
    try:
        with urllib.request.urlopen(url, timeout=10) as response:
            results = json.load(response)
    except urllib.error.HTTPError as e:
        print(f"error: search request failed with HTTP {e.code}")
        return 1
    for item in results.get("items", []):
        print(f"{item['title']}\t{item['link']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
