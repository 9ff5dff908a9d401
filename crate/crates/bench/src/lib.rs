//! Criterion benchmarks for the core crate; see `benches/`.

use laploss_core::data::random_scene;
use laploss_core::ImageGrid;

/// Deterministic synthetic image used by every benchmark.
pub fn scene(height: usize, width: usize) -> ImageGrid {
    random_scene(height, width, 42)
}
