"""
Where replacement tokens come from
==================================

Two tables share one layout: cosine neighbours in an embedding space, and the
most likely successors under corpus bigram counts. A word's replacement is
drawn from a temperature softmax over its k entries, and the temperature
moves once per epoch with validation perplexity.
"""

import numpy as np

from curricle import corpus, neighbors, toy

# a small synthetic corpus: words belong to classes, and classes follow a
# sparse Markov chain, so distributional vectors group each class together
sents = toy.make_corpus(30_000, seed=1)
vocab = corpus.build_vocab([t for s in sents for t in s + [corpus.EOS]])
words, vecs = toy.cooccurrence_vectors(sents, dim=24)
rows = np.array([vecs[words.index(w)] if w in words else np.ones(24)
                 for w in vocab.id_to_token])

k = neighbors.default_k(len(vocab))
print("|V| =", len(vocab), " k = round(log2 |V|) =", k)

table = neighbors.build_neighbor_table(rows, k)
for w in vocab.id_to_token[2:6]:
    ids, sims = table.row(vocab.token_to_id[w])
    shown = ", ".join(f"{vocab.id_to_token[j]} {s:.2f}" for j, s in zip(ids[:5], sims))
    print(f"{w:>6} -> {shown}")

# word tokens are named c<class>w<index>, so same-class neighbours are easy to spot
same = np.mean([
    vocab.id_to_token[j].split("w")[0] == vocab.id_to_token[w].split("w")[0]
    for w in range(2, len(vocab)) for j in table.row(w)[0]
])
print(f"share of neighbours from the same class: {same:.3f}")

# the same words under bigram successor probabilities
stream = corpus.TokenStream(np.array(vocab.encode([t for s in sents for t in s + [corpus.EOS]])),
                            vocab)
tprs = neighbors.build_transition_table(stream, k)
w = vocab.id_to_token[2]
ids, probs = tprs.row(vocab.token_to_id[w])
print(f"\nmost likely successors of {w}:",
      ", ".join(f"{vocab.id_to_token[j]} {p:.3f}" for j, p in zip(ids[:5], probs)))

# temperature: low tau puts nearly all mass on the nearest neighbour
_, sims = table.row(vocab.token_to_id[w])
for tau in (0.05, 0.1, 0.3, 1.0):
    p = neighbors.truncated_softmax(sims, tau)
    print(f"tau {tau:4.2f}  top-1 mass {p[0]:.3f}  entropy {-(p * np.log(p)).sum():.3f}")

# while validation keeps improving, tau climbs toward 1; a bad epoch pulls it back
tau, history = 0.1, []
for ppl in [300, 200, 150, 130, 125, 127, 120, 118, 117, 116]:
    prev = history[-1] if history else float("inf")
    tau = neighbors.update_temperature(tau, ppl, prev)
    history.append(ppl)
    print(f"valid {ppl:4d}  tau -> {tau:.4f}")
