#!/usr/bin/env python3
"""PERSON recogniser for `[ner] kind = "process"`.

Reads one JSON object per line, {"text": "..."}, and answers with
{"spans": [{"start": s, "end": e, "label": "PERSON"}, ...]} using character
offsets, or {"error": "..."} if the line cannot be handled.

Usage: python scripts/spacy_ner.py [--model en_core_web_trf]
"""

import argparse
import json
import sys


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", default="en_core_web_trf")
    args = parser.parse_args()

    import spacy

    nlp = spacy.load(args.model)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            text = json.loads(line)["text"]
            doc = nlp(text)
            spans = [
                {"start": ent.start_char, "end": ent.end_char, "label": ent.label_}
                for ent in doc.ents
                if ent.label_ == "PERSON"
            ]
            reply = {"spans": spans}
        except Exception as exc:  # reported to the caller, which fails loudly
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
