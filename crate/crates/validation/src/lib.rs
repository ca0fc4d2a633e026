//! Holds the `acceptance` test target; run it with
//! `cargo test -p guidance-lab-validation --test acceptance`.
