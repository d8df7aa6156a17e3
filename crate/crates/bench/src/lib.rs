//! Criterion benchmarks for the kernels, the loss, BLEU and single training
//! steps. Run with `cargo bench -p ce-nmt-bench`.
