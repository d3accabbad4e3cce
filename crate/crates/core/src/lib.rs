//! Core library for a dynamic point cloud codec.
//!
//! The codec compresses sequences of colored, voxelized point clouds. Each
//! frame is quantized onto a `2^depth`-cell cubic grid ([`voxel`]), geometry
//! is serialized with an octree occupancy coder ([`octree`]), and temporal
//! redundancy is exploited through graph-based motion estimation:
//!
//! * [`graph`] builds a K-nearest-neighbor graph over occupied voxels and
//!   exposes its combinatorial Laplacian,
//! * [`spectral`] provides the graph Fourier transform (GFT),
//! * [`sgw`] computes spectral graph wavelet feature descriptors used to put
//!   consecutive frames in correspondence,
//! * [`motion`] matches descriptors under a learned Mahalanobis metric,
//!   selects a sparse set of reliable correspondences and interpolates a
//!   dense, graph-smooth motion field,
//! * [`entropy`] implements the bit-level coders (adaptive run-length /
//!   Golomb-Rice and an adaptive-Laplacian arithmetic coder),
//! * [`codec`] ties everything into encode/decode pipelines for motion,
//!   geometry and color, and defines the container format,
//! * [`ply`] reads and writes the PLY interchange format.
//!
//! All per-frame state needed by the decoder is either carried in the
//! bitstream or derived from previously decoded frames, so encoder and
//! decoder stay in lockstep (closed-loop prediction).

pub mod codec;
pub mod entropy;
pub mod graph;
pub mod morton;
pub mod motion;
pub mod octree;
pub mod ply;
pub mod sgw;
pub mod spectral;
pub mod voxel;

pub use codec::{
    decode_sequence, encode_sequence, CodecError, DecodedSequence, EncodedSequence, FrameStats,
    SequenceConfig,
};
pub use graph::{build_knn_graph, VoxelGraph};
pub use motion::{
    estimate_motion, interpolate_motion, train_precision, MotionEstimate, MotionField,
    MotionParams, PrecisionModel, SparseCorrespondences,
};
pub use octree::{apply_xor, build_octree, decode_octree, xor_voxel_sets, Octree};
pub use sgw::{compute_all_descriptors, sgw_transform, FeatureDescriptor, WaveletConfig};
pub use spectral::{eigendecompose, gft, inverse_gft, Spectrum};
pub use voxel::{voxelize, RawPointCloud, VoxelFrame, VoxelGrid, VoxelSet};
