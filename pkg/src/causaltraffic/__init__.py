"""Event-aware traffic speed forecasting with a causal knowledge base."""
