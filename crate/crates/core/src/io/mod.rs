//! On-disk formats: the binary container and FSL gradient tables.

mod container;
mod gradients;

pub use container::{Container, ContainerHeader, ContainerKind, Segment, DTYPE, MAGIC};
pub use gradients::{format_bval, format_bvec, load_scheme, parse_bval, parse_bvec, read_scheme, write_scheme};
