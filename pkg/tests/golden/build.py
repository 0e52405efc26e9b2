"""Regenerate the .ids/.mask golden files from the hand-written walks in cases.json.

Token ids follow directly from the walk: text is its UTF-8 bytes, specials are
256 + their index in the reserved list, "{system}" is the system message.
Run from the repository root:  python tests/golden/build.py
"""

import json
from pathlib import Path

HERE = Path(__file__).parent
SPECIALS = ["<pad>", "<bos>", "[usr]", "[vusr]", "[aswr]", "<o_d>", "<image>"]
SYSTEM = ("The assistant gives helpful, detailed, and polite answers to the user's questions. "
          "Also, the assistant is a curious virtual user can ask complex questions that are "
          "relevant to the content in the image.")


def walk_to_ids(walk):
    ids, mask = [], []
    for piece, learn in walk:
        if piece in SPECIALS:
            toks = [256 + SPECIALS.index(piece)]
        else:
            toks = list((SYSTEM if piece == "{system}" else piece).encode("utf-8"))
        ids += toks
        mask += [int(learn)] * len(toks)
    return ids, mask


def main():
    for case in json.loads((HERE / "cases.json").read_text(encoding="utf-8")):
        ids, mask = walk_to_ids(case["walk"])
        (HERE / f"{case['name']}.ids").write_text(" ".join(map(str, ids)) + "\n")
        (HERE / f"{case['name']}.mask").write_text("".join(map(str, mask)) + "\n")


if __name__ == "__main__":
    main()
