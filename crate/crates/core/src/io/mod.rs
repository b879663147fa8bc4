//! File formats for the pipeline's stage boundaries: UQT binary tensors,
//! fixed-column CSVs, 8-bit PGM heatmaps, key=value text files, and the
//! plain-text net container.

pub mod kv;
pub mod netfile;
pub mod pgm;
pub mod table;
pub mod uqt;
