//! Seamless extraction of generalized mode-μ surfaces (including neutral
//! surfaces) from piecewise-linear 3D symmetric tensor fields on tetrahedral
//! meshes, with differential properties and topology reports.
//!
//! The extraction parameterizes the surface inside each tetrahedron by its
//! medium eigenvectors: curves are first traced on the mesh faces, lifted to
//! the unit sphere of candidate medium eigenvectors, completed with
//! complex-domain boundary arcs, triangulated there and mapped back to
//! space. Because face curves are computed once per face, patches from
//! adjacent tetrahedra share boundary vertices exactly and stitch into a
//! seamless mesh.

pub mod assembly;
pub mod bench;
pub mod cell;
pub mod cli;
pub mod error;
pub mod field;
pub mod io;
pub mod mesh;
pub mod oracle;
pub mod plane;
pub mod poly;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use field::LinearTensorField;
pub use tensor::SymTensor3;
