//! Correspondence-based pose estimation for unseen objects.
//!
//! A query image is matched against pre-rendered templates of the object's
//! CAD model through a hybrid classification and offset representation,
//! giving a coarse pose by PnP. The pose is then refined by render-and-compare
//! with a probabilistic flow and a weighted, differentiable PnP solve.
//! Learned predictors are replaced by seeded oracles ([`mock`]) so the
//! geometry can be exercised and scored with the BOP metrics ([`eval`]).

// `!(x > 0.0)` deliberately rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod correspondence;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geom;
pub mod losses;
pub mod mesh;
pub mod mock;
pub mod pnp;
pub mod template;

pub use benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport, ObjectModel, SceneResult};
pub use correspondence::{ClassTensor, Match, MatchSet, OffsetTensor};
pub use error::{Error, Result};
pub use eval::{average_recall, MetricModel, PoseError, RecallSummary};
pub use flow::FlowField;
pub use geom::{DepthMap, Intrinsics, PointSet, Pose, Vec2, Vec3};
pub use losses::LossBreakdown;
pub use mesh::Mesh;
pub use mock::{NoiseModel, Scene};
pub use pnp::{Correspondence, RefineProblem, SolverConfig};
pub use template::{Template, TemplateConfig, TemplateSet};
