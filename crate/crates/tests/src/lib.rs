//! Workspace-level acceptance suite. The checks live in `tests/acceptance.rs`
//! and run with `cargo test -p disco-tests --test acceptance`.
