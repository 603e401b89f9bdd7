"""Ontology concept recognition: extraction, retrieval, linking, evaluation."""

__version__ = "0.1.0"

from .ontology import Concept, Ontology, alias_list, load_obo, parse_obo, subtree_filter
from .extraction import EntitySpan, Segment, Token, extract_rule_based, extract_segment_based
from .embedding import Embedder, FileEmbedder, HttpEmbedder, MockEmbedder
from .retrieval import Candidate, ConceptIndex, RetrievalDecision, build_index, query, top_k_concepts
from .linking import LinkedMention, LinkVerdict, PromptPair, build_prompt, link, parse_reply
from .postprocess import resolve_overlaps
from .evaluation import EvalReport, GoldMention, document_metrics, load_gold, mention_metrics
from .pipeline import Corpus, Document, RunConfig, ingest_corpus, load_config, run

__all__ = [
    "Concept", "Ontology", "alias_list", "load_obo", "parse_obo", "subtree_filter",
    "EntitySpan", "Segment", "Token", "extract_rule_based", "extract_segment_based",
    "Embedder", "FileEmbedder", "HttpEmbedder", "MockEmbedder",
    "Candidate", "ConceptIndex", "RetrievalDecision", "build_index", "query", "top_k_concepts",
    "LinkedMention", "LinkVerdict", "PromptPair", "build_prompt", "link", "parse_reply",
    "resolve_overlaps",
    "EvalReport", "GoldMention", "document_metrics", "load_gold", "mention_metrics",
    "Corpus", "Document", "RunConfig", "ingest_corpus", "load_config", "run",
]
