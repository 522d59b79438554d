"""Shared fixture: a tiny randomly initialized encoder saved to disk.

Built once per session so the tests never touch the network. The tokenizer
is a plain whitespace word-level one with no special-token post-processing,
which keeps hand-computed token counts literal (a two-word document really
is two tokens) and makes the empty-document path reachable.
"""

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import PreTrainedTokenizerFast, XLMRobertaConfig, XLMRobertaModel

VOCAB = {
    "<s>": 0,
    "<pad>": 1,
    "</s>": 2,
    "<unk>": 3,
    "owl": 4,
    "sat": 5,
    "here": 6,
    "quiet": 7,
    "night": 8,
    "river": 9,
    "stone": 10,
    "wind": 11,
}

HIDDEN = 16


@pytest.fixture(scope="session")
def encoder_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny-encoder")

    raw = Tokenizer(models.WordLevel(vocab=VOCAB, unk_token="<unk>"))
    raw.pre_tokenizer = pre_tokenizers.Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=raw,
        unk_token="<unk>",
        pad_token="<pad>",
        bos_token="<s>",
        eos_token="</s>",
    )
    tokenizer.save_pretrained(path)

    config = XLMRobertaConfig(
        vocab_size=len(VOCAB),
        hidden_size=HIDDEN,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
        pad_token_id=VOCAB["<pad>"],
        type_vocab_size=1,
    )
    torch.manual_seed(0)
    XLMRobertaModel(config).save_pretrained(path)
    return str(path)
