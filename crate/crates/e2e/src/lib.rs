//! End-to-end acceptance checks for `ave3-core`. The suite lives in `tests/acceptance.rs`.
