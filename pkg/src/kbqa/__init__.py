"""Enterprise knowledge-base retrieval and answer generation."""

__version__ = "0.1.0"

from .corpus import Corpus, Document, Provenance, QDPair, Query, QType, ingest, tokenize
from .curriculum import CurriculumRetriever, FilterPolicy, TrainConfig, consistency_filter, run_curriculum, select_next
from .dense import DenseIndex, TokenEmbeddings, build_dense, dense_topk, maxsim_score
from .encoder import TrainableEncoder, infonce_loss, train_step
from .evalkit import bleu_rouge, em_f1, retrieval_metrics
from .generation import CotAnswer, answer_question, build_cot_prompt, integrate_answers, parse_cot_response
from .llm import HttpLlmClient, LlmRequest, LlmResponse
from .qgen import generate_questions
from .sparse import BM25Retriever, InvertedIndex, bm25_topk, build_sparse

__all__ = [
    "BM25Retriever",
    "Corpus",
    "CotAnswer",
    "CurriculumRetriever",
    "DenseIndex",
    "Document",
    "FilterPolicy",
    "HttpLlmClient",
    "InvertedIndex",
    "LlmRequest",
    "LlmResponse",
    "Provenance",
    "QDPair",
    "QType",
    "Query",
    "TokenEmbeddings",
    "TrainConfig",
    "TrainableEncoder",
    "answer_question",
    "bleu_rouge",
    "bm25_topk",
    "build_cot_prompt",
    "build_dense",
    "build_sparse",
    "consistency_filter",
    "dense_topk",
    "em_f1",
    "generate_questions",
    "infonce_loss",
    "ingest",
    "integrate_answers",
    "maxsim_score",
    "parse_cot_response",
    "retrieval_metrics",
    "run_curriculum",
    "select_next",
    "tokenize",
    "train_step",
]
