//! Criterion benchmarks for the tensor kernels, renderer and training step.
//! Run with `cargo bench -p dlab-bench`.
