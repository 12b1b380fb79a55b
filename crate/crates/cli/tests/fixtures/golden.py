"""Rebuilds golden_corpus.csv from the NVD feeds in nvd/.

    python3 golden.py > golden_corpus.csv
"""
import csv
import json
import pathlib
import sys

SENTINELS = {"NVD-CWE-Other", "NVD-CWE-noinfo"}


def record(item):
    try:
        cve_id = item["cve"]["CVE_data_meta"]["ID"]
        year = int(item["publishedDate"][:4])
    except (KeyError, TypeError, ValueError):
        return None
    descs = item["cve"].get("description", {}).get("description_data")
    if descs is None:
        return None
    english = [d["value"] for d in descs if d.get("lang") == "en"]
    if not english:
        return None
    text = english[0]
    if text.lstrip().startswith("** REJECT **"):
        return None
    text = " ".join(text.split())
    if not text:
        return None
    labels = set()
    for entry in item["cve"].get("problemtype", {}).get("problemtype_data", []):
        for d in entry.get("description", []):
            v = d["value"].strip()
            if v and v not in SENTINELS:
                labels.add(v)
    return cve_id, year, text, ";".join(sorted(labels))


def order(cve_id):
    parts = cve_id.split("-")
    try:
        return (0, int(parts[1]), int(parts[2]), "") if len(parts) == 3 else (1, 0, 0, cve_id)
    except ValueError:
        return (1, 0, 0, cve_id)


def main():
    here = pathlib.Path(__file__).parent
    rows = []
    for feed in sorted((here / "nvd").glob("*.json")):
        for item in json.loads(feed.read_text(encoding="utf-8"))["CVE_Items"]:
            r = record(item)
            if r is not None:
                rows.append(r)
    rows.sort(key=lambda r: order(r[0]))
    seen = set()
    out = csv.writer(sys.stdout, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    out.writerow(["id", "year", "description", "labels"])
    for r in rows:
        if r[0] not in seen:
            seen.add(r[0])
            out.writerow(r)


if __name__ == "__main__":
    main()
