"""How alike are the attention and FFN outputs to the layer's input state?

For each layer, compares the MHSA output and the FFN output with the hidden
state entering the layer. Cosine is measured on the vectors; Jaccard is
measured on the top-k tokens each vector promotes through the unembedding.
"""

from desk import desk_setup
from pmetlab.analysis import similarity_profile

records, _, model = desk_setup()
prompts = [r.src for r in records]

for k in (10, 50):
    prof = similarity_profile(model, prompts, k=k)
    print(f"\n{prof.n_prompts} prompts, top-{prof.k_used} tokens")
    print("layer  cos_mhsa  cos_ffn  jac_mhsa  jac_ffn")
    for row in prof.rows():
        print(f"{row[0]:>5}  " + "  ".join(f"{x:7.3f}" for x in row[1:]))

# lower FFN similarity means the FFN writes more new content into the stream
prof = similarity_profile(model, prompts, k=50)
for l, cm, cf in zip(prof.layers, prof.cos_mhsa, prof.cos_ffn):
    side = "FFN" if cf < cm else "MHSA"
    print(f"layer {l}: {side} output is further from the input")
