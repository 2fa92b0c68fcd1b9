//! Metrics, frozen-feature probes and factor analysis.

pub mod features;
pub mod metrics;
pub mod probe;
pub mod variance;

pub use features::{labelled_patches, majority_patch_labels, patch_features, FeatureLayer, LabelledPatches};
pub use metrics::{miou, overall_accuracy, write_metric_report, ConfusionMatrix, IouReport};
pub use probe::{fit_linear_probe, knn_predict, knn_probe, linear_probe, LinearProbe, LinearProbeConfig};
pub use variance::{polyfit_r2, variance_decomposition};
