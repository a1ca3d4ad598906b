"""Shared setup for the demos: the default corpus and a trained desk model.

The model is cached under ``demos/_cache`` so later demos skip the ~15 s
training run. Delete that directory to retrain.
"""

from pathlib import Path

from pmetlab.corpus import CorpusConfig, generate_corpus
from pmetlab.model import ModelConfig, Vocab, init_model, load_checkpoint, save_checkpoint
from pmetlab.trainer import TrainConfig, train

CACHE = Path(__file__).parent / "_cache"


def desk_setup(verbose=True):
    records, vocab, texts = generate_corpus(CorpusConfig())
    ckpt = CACHE / "model.ckpt"
    if ckpt.exists():
        return records, texts, load_checkpoint(ckpt)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = init_model(cfg, Vocab(vocab))
    if verbose:
        print(f"training a {cfg.n_layers}-layer model on {len(texts)} texts ...")
    model, history = train(model, texts, TrainConfig(), records=records)
    if verbose:
        print(f"  stopped after {history[-1][0]} epochs, memorization {history[-1][2]:.2f}")
    CACHE.mkdir(exist_ok=True)
    save_checkpoint(model, ckpt)
    return records, texts, model
