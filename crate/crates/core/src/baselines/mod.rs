//! Tree-based multi-label baselines: Binary Relevance, Classifier Chains and
//! Label Powerset, all on top of a from-scratch random forest.

pub mod forest;
pub mod multilabel;
pub mod tree;

pub use forest::{ForestParams, RandomForest};
pub use multilabel::{fit_br, fit_cc, fit_lp, BrModel, CcModel, LpModel};
pub use tree::{DecisionTree, FeatureMatrix, TreeParams};
