//! End-to-end acceptance suite; see `tests/acceptance.rs`.
