"""Test suite for mvp_rerank."""
