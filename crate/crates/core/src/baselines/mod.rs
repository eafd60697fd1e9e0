//! Point-estimate comparison models sharing the feature pipeline: a
//! deterministic network, kNN regression and the elastic net.

pub mod elastic_net;
pub mod knn;
pub mod point_nn;
pub mod search;

pub use elastic_net::{fit_elastic_net, soft_threshold, ElasticNetModel};
pub use knn::KnnModel;
pub use point_nn::{train_point_nn, PointLoss, PointNnModel};
pub use search::{search_elastic_net, search_knn, ALPHA_GRID, K_GRID, LAMBDA_GRID};
