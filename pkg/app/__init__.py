"""
ctxlm: context-dependent word-class language models for spoken dialogue.

Trains one class n-gram model per dialogue-context class, switches between
them as the dialogue manager moves through its acts and compares the result
against a single context-independent model.
"""

__version__ = "1.0.0"
