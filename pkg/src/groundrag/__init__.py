"""Grounded retrieval-augmented question answering.

Corpus cleaning and de-duplication, formula/table-preserving chunking,
binary-quantized vector search with rescoring, reranked multi-KB retrieval,
a model gateway with deterministic mocks, hallucination detection and
revision, budgeted conversation memory, and evaluation metrics.
"""

from .chunker import Chunk, ChunkConfig, chunk_document, detect_protected_spans
from .conversation import ConversationManager, ConversationState, PromptSections, TokenBudget
from .corpus import CleanDocument, CleaningConfig, RawDocument, clean_corpus, clean_document
from .evaluation import EvalReport
from .gateway import Gateway, GatewayConfig, build_gateway
from .hallucination import HallucinationPipeline, RevisionTrace
from .index import IndexRegistry, VectorIndex
from .retrieval import RetrievalConfig, Retriever

__version__ = "0.1.0"

__all__ = [
    "Chunk",
    "ChunkConfig",
    "CleanDocument",
    "CleaningConfig",
    "ConversationManager",
    "ConversationState",
    "EvalReport",
    "Gateway",
    "GatewayConfig",
    "HallucinationPipeline",
    "IndexRegistry",
    "PromptSections",
    "RawDocument",
    "RetrievalConfig",
    "Retriever",
    "RevisionTrace",
    "TokenBudget",
    "VectorIndex",
    "build_gateway",
    "chunk_document",
    "clean_corpus",
    "clean_document",
    "detect_protected_spans",
]
