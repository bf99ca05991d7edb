//! Criterion benchmarks for the detector and corpus pipeline.
