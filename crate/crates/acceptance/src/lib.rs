//! Acceptance suite for the helix toy problem; see `tests/acceptance.rs`.
