#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mpmdse::designspace::DesignConfiguration;
use mpmdse::oracle::KernelSpec;

pub const KERNELS: [&str; 3] = ["toy", "gemm", "stencil"];

pub fn kernel_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../data/kernels/{name}.json"))
}

pub fn kernel(name: &str) -> KernelSpec {
    KernelSpec::read(&kernel_path(name)).unwrap()
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Configuration number `index` modulo the space size.
pub fn config(spec: &KernelSpec, index: u128) -> DesignConfiguration {
    spec.space.config_at(index % spec.space.size())
}
