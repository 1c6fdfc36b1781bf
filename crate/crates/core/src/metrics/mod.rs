//! Evaluation metrics: trajectory alignment and errors, depth accuracy, point-cloud
//! distances, plus readers and writers for the file formats they consume.

pub mod cloud;
pub mod depth;
pub mod kdtree;
pub mod sim3;
pub mod trajectory;

pub use cloud::{chamfer, normal_consistency, Chamfer, PointCloud};
pub use depth::{depth_metrics, DepthFrame, DepthMetrics, DepthMode};
pub use sim3::{umeyama_sim3, Sim3Transform};
pub use trajectory::{ate, read_tum, rpe, validate_trajectory, write_tum, Rpe, TrajectoryPose};
