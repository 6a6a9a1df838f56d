"""
Website embeddings
==================

The 100 activations of the last hidden layer form a dense vector per
site.  Similar pages land close together.
"""
import numpy as np

from sitevec import StubEncoder, assemble, extract_page, init_weights
from sitevec.model import embed

pages = {
    "https://chess-club.org/": "<title>Chess club</title><p>Openings and endgames. Weekly chess games.</p>",
    "https://chess-news.com/": "<title>Chess news</title><p>Openings and endgames. Tournament chess games.</p>",
    "https://bakery.net/": "<title>Bakery</title><p>Fresh bread every morning. Cakes to order.</p>",
}
model = init_weights(0)  # untrained, but the geometry of the inputs already shows
backend = StubEncoder()
vecs = {u: embed(assemble(extract_page(h, u), None, backend).values, model) for u, h in pages.items()}


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


urls = list(vecs)
for i, a in enumerate(urls):
    for b in urls[i + 1 :]:
        print(f"{cosine(vecs[a], vecs[b]):.3f}  {a}  {b}")
print("embedding length:", len(vecs[urls[0]]))
