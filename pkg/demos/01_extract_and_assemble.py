"""
From HTML to a 5,169-value feature vector
=========================================

A homepage is reduced to a handful of text fields, then every field is
encoded and the blocks are laid side by side.
"""
from pathlib import Path

import numpy as np

from sitevec import LAYOUT_V1, StubEncoder, assemble, extract_page

html = (Path(__file__).parent.parent / "tests" / "data" / "university.html").read_text(encoding="utf-8")
page = extract_page(html, "https://www.example-institute.edu/")

# the structured record; cookie banners and modals are gone
print("title:      ", page.title)
print("sentences:  ", len(page.sentences), "->", page.sentences[:2])
print("link tokens:", page.link_tokens[:8])
print("domain:     ", page.domain_tokens, " tld index:", page.tld_index)
print("metatags on:", sum(page.metatag_flags), "of", len(page.metatag_flags))

# %% The layout fixes where each block lives
for name in LAYOUT_V1.names:
    sl = LAYOUT_V1.slice(name)
    print(f"{name:<12}{sl.start:>5} .. {sl.stop:<5}({LAYOUT_V1.size(name)})")

# %% Assemble with the deterministic stub encoder; no screenshot available
fv = assemble(page, None, StubEncoder())
print("vector length", fv.values.shape[0])
print("blocks present:", [n for n in LAYOUT_V1.names if fv.present(n)])
print("visual block is all zeros:", not np.any(fv.block("visual")))
