//! Downstream evaluation protocols and metrics.

pub mod kmeans;
pub mod metrics;
pub mod pca;
pub mod tasks;

pub use kmeans::{kmeans as run_kmeans, ClusteringResult, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use metrics::{ari, clustering_accuracy, clustering_metrics, f1_score, nmi};
pub use pca::{pca_project, symmetric_eigen, PcaModel};
pub use tasks::{
    cluster_products, fine_tune, linear_probe, top1_matching_accuracy, zero_shot_classify,
    FineTuneConfig, LabeledEmbeddings, Modality,
};
