//! Holds the `acceptance` test target. Run it with
//! `cargo test -p gipsi-acceptance --test acceptance`.
