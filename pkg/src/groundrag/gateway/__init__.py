"""Model gateway: one entry point for chat, embedding, reranking and judging."""

from .core import (
    JUDGE_FORMAT_INSTRUCTIONS,
    ROLES,
    Gateway,
    GatewayConfig,
    GatewayError,
    GatewayHTTPError,
    GatewayTimeout,
    GatewayUnavailable,
    HTTPTransport,
    JudgeParseError,
    MalformedResponse,
    PromptAssetError,
    PromptAssets,
    RoleConfig,
    ScriptedMockError,
    build_gateway,
    loads_object,
    parse_judge_score,
)
from .mocks import (
    EchoChat,
    HashingEmbedder,
    LexicalJudge,
    LexicalReranker,
    MockStack,
    ScriptedMock,
    StackChat,
    any_request,
    contains,
    mock_transports,
    prompt_id,
)

# Prompt ids other modules render; all must resolve.
REQUIRED_PROMPTS = (
    "judge",
    "judge_with_context",
    "pairwise_judge",
    "query_rewrite",
    "answer",
    "hallucination_detect",
    "hallucination_reformulate",
    "hallucination_revise",
    "hallucination_rank",
    "summarize",
    "summarize_strict",
    "eval_query_generation",
    "ar_chunk_filter",
    "ar_strategy_generation",
    "ar_strategy_selection",
    "ar_generation",
    "selfqa",
    "contextqa_filter",
)

__all__ = [name for name in dir() if not name.startswith("_")]
