//! Analytic CSG shapes with exact occupancy oracles, watertight meshes,
//! a ray-cast renderer, and dataset generation.

mod csg;
pub mod dataset;
pub mod mesh;
pub mod render;

pub use csg::{occupancy_analytic, Csg};
pub use dataset::{
    generate_dataset, load_dataset, Catalog, Dataset, GenConfig, LoadedView, Manifest, RaySamples,
    ViewEntry,
};
pub use mesh::{transform_mesh_to_camera, MeshOccupancy, TriMesh};
pub use render::{render_view, Image, Scene};
